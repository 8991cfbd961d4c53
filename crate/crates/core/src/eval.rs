//! Robustness metrics: natural, per-arm adversarial, minimum and union
//! accuracy, aggregated over seeds.
//!
//! An example counts as robustly correct under an attack only if both the
//! clean input and the attacked input are classified correctly. The attack
//! keeps the clean point as a candidate, so this matches the usual count
//! whenever the model is wrong on the clean input too, and it makes the
//! ordering `union ≤ min ≤ arm ≤ natural` hold exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{attack, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Predictor;
use crate::repspace::RepresentationSpace;
use crate::tensor::argmax_rows;
use crate::trainers::LossArm;

/// Examples attacked per batch during evaluation.
pub const EVAL_BATCH: usize = 250;

fn percentage(mask: &[bool]) -> f64 {
    100.0 * mask.iter().filter(|c| **c).count() as f64 / mask.len() as f64
}

fn clean_mask<P: Predictor + ?Sized>(model: &P, data: &Dataset) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let (x, y) = chunk?;
        let pred = argmax_rows(&model.scores(&x)?);
        mask.extend(pred.iter().zip(&y).map(|(p, l)| p == l));
    }
    Ok(mask)
}

fn robust_mask<P: Predictor + ?Sized>(
    model: &P,
    space: &RepresentationSpace,
    data: &Dataset,
    spec: &AttackSpec,
) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let (x, y) = chunk?;
        let clean = argmax_rows(&model.scores(&x)?);
        let adv = attack(model, space, &x, &y, spec)?.adversarial;
        let attacked = argmax_rows(&model.scores(&adv)?);
        mask.extend((0..y.len()).map(|i| clean[i] == y[i] && attacked[i] == y[i]));
    }
    Ok(mask)
}

/// Percentage of argmax-correct predictions.
pub fn natural_accuracy<P: Predictor + ?Sized>(model: &P, data: &Dataset) -> Result<f64> {
    Ok(percentage(&clean_mask(model, data)?))
}

/// Percentage of examples still correct after `spec` is run in the arm's
/// representation space.
pub fn adversarial_accuracy<P: Predictor + ?Sized>(
    model: &P,
    arm: &LossArm,
    data: &Dataset,
    spec: &AttackSpec,
) -> Result<f64> {
    Ok(percentage(&robust_mask(model, &arm.space, data, spec)?))
}

/// Percentage of examples on which every arm's attack fails.
pub fn union_attack_accuracy<P: Predictor + ?Sized>(
    model: &P,
    arms: &[LossArm],
    data: &Dataset,
    specs: &[AttackSpec],
) -> Result<f64> {
    if arms.is_empty() {
        return Err(Error::Empty("arm set"));
    }
    if specs.len() != arms.len() {
        return Err(Error::shape("union_attack_accuracy", &[arms.len()], &[specs.len()]));
    }
    let mut all = vec![true; data.len()];
    for (arm, spec) in arms.iter().zip(specs) {
        let mask = robust_mask(model, &arm.space, data, spec)?;
        all.iter_mut().zip(mask).for_each(|(a, m)| *a &= m);
    }
    Ok(percentage(&all))
}

/// One metric across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(per_seed: Vec<f64>) -> Self {
        let n = per_seed.len() as f64;
        let mean = per_seed.iter().sum::<f64>() / n;
        let std = if per_seed.len() > 1 {
            (per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MetricSummary { mean, std, per_seed }
    }
}

/// Accuracies of one model (or one run) per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustnessReport {
    pub seeds: Vec<u64>,
    pub natural_accuracy: MetricSummary,
    pub min_accuracy: MetricSummary,
    pub union_accuracy: MetricSummary,
    pub per_arm: BTreeMap<String, MetricSummary>,
}

/// Metrics of a single seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedMetrics {
    pub seed: u64,
    pub natural: f64,
    pub per_arm: Vec<(String, f64)>,
    pub union: f64,
}

impl SeedMetrics {
    pub fn min(&self) -> f64 {
        self.per_arm.iter().map(|(_, a)| *a).fold(f64::INFINITY, f64::min)
    }
}

impl RobustnessReport {
    pub fn from_seeds(rows: &[SeedMetrics]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("seed list"))?;
        if first.per_arm.is_empty() {
            return Err(Error::Empty("arm set"));
        }
        let names: Vec<&String> = first.per_arm.iter().map(|(n, _)| n).collect();
        for r in rows {
            if r.per_arm.iter().map(|(n, _)| n).ne(names.iter().copied()) {
                return Err(Error::invalid("robustness report", "seeds evaluated different arms"));
            }
        }
        let column = |f: &dyn Fn(&SeedMetrics) -> f64| MetricSummary::from_values(rows.iter().map(f).collect());
        let per_arm = names
            .iter()
            .enumerate()
            .map(|(i, n)| ((*n).clone(), column(&|r| r.per_arm[i].1)))
            .collect();
        Ok(RobustnessReport {
            seeds: rows.iter().map(|r| r.seed).collect(),
            natural_accuracy: column(&|r| r.natural),
            min_accuracy: column(&|r| r.min()),
            union_accuracy: column(&|r| r.union),
            per_arm,
        })
    }

    /// Per-seed rows, arms in name order.
    pub fn rows(&self) -> Vec<SeedMetrics> {
        (0..self.seeds.len())
            .map(|s| SeedMetrics {
                seed: self.seeds[s],
                natural: self.natural_accuracy.per_seed[s],
                per_arm: self.per_arm.iter().map(|(n, m)| (n.clone(), m.per_seed[s])).collect(),
                union: self.union_accuracy.per_seed[s],
            })
            .collect()
    }

    /// Concatenates the seeds of several reports over the same arms.
    pub fn merge(reports: &[RobustnessReport]) -> Result<Self> {
        let rows: Vec<SeedMetrics> = reports.iter().flat_map(RobustnessReport::rows).collect();
        Self::from_seeds(&rows)
    }

    /// Checks `union ≤ min ≤ every arm ≤ natural ≤ 100` on every seed, and
    /// that every value lies in `[0, 100]`.
    pub fn check_ordering(&self) -> Result<()> {
        for r in self.rows() {
            let min = r.min();
            let bad = |msg: String| Err(Error::invalid("robustness report", format!("seed {}: {msg}", r.seed)));
            if !(0.0..=100.0).contains(&r.union) || !(0.0..=100.0).contains(&r.natural) {
                return bad("value outside [0, 100]".into());
            }
            if r.union > min {
                return bad(format!("union {} above min {min}", r.union));
            }
            if let Some((n, a)) = r.per_arm.iter().find(|(_, a)| *a > r.natural) {
                return bad(format!("arm {n} at {a} above natural {}", r.natural));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per metric with columns `metric,mean,std`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,mean,std\n");
        let mut row = |name: &str, m: &MetricSummary| out.push_str(&format!("{name},{},{}\n", m.mean, m.std));
        row("natural_accuracy", &self.natural_accuracy);
        row("min_accuracy", &self.min_accuracy);
        row("union_accuracy", &self.union_accuracy);
        for (name, m) in &self.per_arm {
            row(name, m);
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Evaluates natural, per-arm (with each arm's evaluation attack), minimum
/// and union accuracy on `data` once per seed. The seed drives the random
/// restarts of the attacks.
pub fn evaluate_all<P: Predictor + ?Sized>(
    model: &P,
    arms: &[LossArm],
    data: &Dataset,
    seeds: &[u64],
) -> Result<RobustnessReport> {
    if arms.is_empty() {
        return Err(Error::Empty("arm set"));
    }
    let clean = clean_mask(model, data)?;
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut all = clean.clone();
        let mut per_arm = Vec::with_capacity(arms.len());
        for arm in arms {
            let spec = arm.eval_attack.clone().with_seed(seed);
            let mask = robust_mask(model, &arm.space, data, &spec)?;
            all.iter_mut().zip(&mask).for_each(|(a, m)| *a &= *m);
            per_arm.push((arm.name.clone(), percentage(&mask)));
        }
        rows.push(SeedMetrics {
            seed,
            natural: percentage(&clean),
            per_arm,
            union: percentage(&all),
        });
    }
    RobustnessReport::from_seeds(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::Norm;
    use crate::model::{Architecture, Classifier, Layer};
    use crate::repspace::{dct2d_space, identity_space};
    use crate::tensor::Tensor;

    fn dataset(n: usize, seed: u64) -> Dataset {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 16).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels = (0..n).map(|i| i % 3).collect();
        Dataset::new(Tensor::new(vec![n, 4, 4, 1], data).unwrap(), labels).unwrap()
    }

    fn linear(seed: u64) -> Classifier {
        let arch = Architecture::new([4, 4, 1], vec![Layer::Flatten, Layer::Dense { units: 3 }]).unwrap();
        Classifier::he_init(arch, seed)
    }

    /// Always predicts `class`, via a zero weight matrix and a one-hot bias.
    fn constant(class: usize) -> Classifier {
        let arch = Architecture::new([4, 4, 1], vec![Layer::Flatten, Layer::Dense { units: 3 }]).unwrap();
        let mut params = vec![0.0; arch.param_count()];
        params[16 * 3 + class] = 1.0;
        Classifier::with_params(arch, params).unwrap()
    }

    fn arms() -> Vec<LossArm> {
        vec![
            LossArm::new(0, identity_space(), AttackSpec::new(Norm::Linf, 0.1, 5)),
            LossArm::new(1, dct2d_space(4, 4, 1).unwrap(), AttackSpec::new(Norm::L2, 0.5, 5)),
            LossArm::new(2, identity_space(), AttackSpec::new(Norm::L1, 1.0, 5)),
        ]
    }

    #[test]
    fn constant_model_scores_the_class_prior() {
        let d = dataset(30, 0);
        assert_eq!(natural_accuracy(&constant(1), &d).unwrap(), 100.0 / 3.0);
    }

    #[test]
    fn zero_strength_attacks_equal_natural_accuracy() {
        let d = dataset(40, 1);
        let m = linear(3);
        let nat = natural_accuracy(&m, &d).unwrap();
        for arm in arms() {
            let zero_steps = arm.eval_attack.clone().with_steps(0);
            assert_eq!(adversarial_accuracy(&m, &arm, &d, &zero_steps).unwrap(), nat);
            let zero_eps = AttackSpec::new(arm.eval_attack.norm, 0.0, 5);
            assert_eq!(adversarial_accuracy(&m, &arm, &d, &zero_eps).unwrap(), nat);
        }
        let specs: Vec<AttackSpec> = arms().iter().map(|a| a.eval_attack.clone().with_steps(0)).collect();
        assert_eq!(union_attack_accuracy(&m, &arms(), &d, &specs).unwrap(), nat);
    }

    #[test]
    fn single_arm_union_equals_that_arm() {
        let d = dataset(40, 2);
        let m = linear(4);
        let a = &arms()[0..1];
        let spec = a[0].eval_attack.clone();
        assert_eq!(
            union_attack_accuracy(&m, a, &d, &[spec.clone()]).unwrap(),
            adversarial_accuracy(&m, &a[0], &d, &spec).unwrap()
        );
        assert!(union_attack_accuracy(&m, &[], &d, &[]).is_err());
    }

    #[test]
    fn report_ordering_and_aggregation() {
        let d = dataset(60, 5);
        let m = linear(7);
        let report = evaluate_all(&m, &arms(), &d, &[0, 1, 1]).unwrap();
        report.check_ordering().unwrap();
        let rows = report.rows();
        assert_eq!(rows[1], SeedMetrics { seed: 1, ..rows[2].clone() });
        assert!(report.union_accuracy.mean <= report.min_accuracy.mean);

        let one = evaluate_all(&m, &arms(), &d, &[4]).unwrap();
        assert_eq!(one.natural_accuracy.std, 0.0);
        assert_eq!(one.min_accuracy.std, 0.0);
    }

    #[test]
    fn sample_std() {
        let m = MetricSummary::from_values(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn json_schema_and_merge() {
        let d = dataset(30, 6);
        let m = linear(8);
        let a = evaluate_all(&m, &arms(), &d, &[0]).unwrap();
        let b = evaluate_all(&linear(9), &arms(), &d, &[1]).unwrap();
        let json: serde_json::Value = serde_json::from_str(&a.to_json().unwrap()).unwrap();
        for key in ["natural_accuracy", "min_accuracy", "union_accuracy"] {
            assert!(json[key]["mean"].is_number() && json[key]["per_seed"].is_array());
        }
        assert!(json["per_arm"]["pixel-linf"]["std"].is_number());
        let back: RobustnessReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, a);

        let merged = RobustnessReport::merge(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(merged.seeds, vec![0, 1]);
        assert_eq!(
            merged.natural_accuracy.per_seed,
            vec![a.natural_accuracy.mean, b.natural_accuracy.mean]
        );
        let csv = merged.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 + 3);
        assert!(csv.starts_with("metric,mean,std\nnatural_accuracy,"));
    }

    #[test]
    fn merge_rejects_different_arms() {
        let d = dataset(30, 7);
        let m = linear(1);
        let a = evaluate_all(&m, &arms(), &d, &[0]).unwrap();
        let b = evaluate_all(&m, &arms()[..2], &d, &[0]).unwrap();
        assert!(RobustnessReport::merge(&[a, b]).is_err());
    }

    #[test]
    fn more_restarts_never_help_the_model() {
        let d = dataset(40, 8);
        let m = linear(2);
        let arm = &arms()[0];
        let spec = AttackSpec::new(Norm::Linf, 0.1, 3).with_seed(11);
        let mut last = 100.0;
        for restarts in 1..=4 {
            let acc = adversarial_accuracy(&m, arm, &d, &spec.clone().with_restarts(restarts)).unwrap();
            assert!(acc <= last);
            last = acc;
        }
    }
}
