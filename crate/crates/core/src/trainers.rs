//! Training over a set of loss arms: scalable multiplicative weights, round
//! robin, greedy, single-arm, and the exact multiplicative-weights loop over
//! a cost-sensitive oracle.
//!
//! All neural trainers share one driver. A step `t` runs `r` epochs of
//! mini-batch SGD, each mini-batch trained on the robust loss of one arm,
//! then snapshots θ_t and measures every arm's robust loss on the validation
//! set. Only the arm-selection rule differs between trainers.
//!
//! Two RNG streams come from the run seed: one shuffles mini-batches, the
//! other samples arms. A one-arm MWU run therefore visits exactly the same
//! batches as single-arm training.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack, AttackSpec};
use crate::data::{Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::model::{average_params, Classifier, ParamSnapshot};
use crate::repspace::RepresentationSpace;

/// Cap applied to losses before a multiplicative update.
pub const LOSS_CAP: f64 = 10.0;

/// Tolerance for "sums to one".
pub const SIMPLEX_TOLERANCE: f64 = 1e-12;

/// One robust loss `L_i`: an attack in a representation space, plus its
/// multiplicative weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LossArm {
    pub index: usize,
    pub name: String,
    pub space: RepresentationSpace,
    /// Training-strength attack, also used for validation losses.
    pub attack: AttackSpec,
    /// Evaluation-strength attack.
    pub eval_attack: AttackSpec,
    weight: f64,
}

impl LossArm {
    /// Arm with weight 1 whose evaluation attack equals its training attack.
    pub fn new(index: usize, space: RepresentationSpace, attack: AttackSpec) -> Self {
        LossArm {
            index,
            name: format!("{}-{}", space.name(), attack.norm.name()),
            space,
            eval_attack: attack.clone(),
            attack,
            weight: 1.0,
        }
    }

    pub fn with_eval_attack(mut self, eval_attack: AttackSpec) -> Self {
        self.eval_attack = eval_attack;
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn reset_weight(&mut self) {
        self.weight = 1.0;
    }
}

/// Trainer hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MwuConfig {
    /// Multiplicative step η.
    pub eta: f64,
    /// Number of steps T.
    pub steps: usize,
    /// Epochs per step r.
    pub epochs_per_step: usize,
    /// Window h of snapshots averaged at the end.
    pub window: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epochs over which the training attacks' radius ramps linearly from 0
    /// to ε; 0 disables the ramp. Validation always uses the full radius.
    pub epsilon_warmup: usize,
}

impl Default for MwuConfig {
    fn default() -> Self {
        MwuConfig {
            eta: 1.0 / LOSS_CAP,
            steps: 20,
            epochs_per_step: 3,
            window: 1,
            batch_size: 128,
            learning_rate: 0.05,
            seed: 0,
            epsilon_warmup: 0,
        }
    }
}

impl MwuConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid("trainer config", msg));
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta {} must be ≥ 0", self.eta));
        }
        if self.steps == 0 || self.epochs_per_step == 0 || self.batch_size == 0 {
            return bad("steps, epochs_per_step and batch_size must be ≥ 1".into());
        }
        if self.window == 0 || self.window > self.steps {
            return bad(format!("window {} outside 1..={}", self.window, self.steps));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be > 0", self.learning_rate));
        }
        Ok(())
    }
}

/// What happened during one step `t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Arm-selection distribution used during the step.
    pub p: Vec<f64>,
    /// Validation robust loss of every arm at θ_t.
    pub val_losses: Vec<f64>,
    /// Mini-batches trained on each arm during the step.
    pub chosen_counts: Vec<usize>,
    pub snapshot_id: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            writeln!(out, "{}", serde_json::to_string(r)?).expect("write to string");
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(TrainLog { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in std::io::BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }

    /// Total mini-batches per arm over the run.
    pub fn total_counts(&self) -> Vec<usize> {
        let k = self.records.first().map_or(0, |r| r.chosen_counts.len());
        let mut total = vec![0; k];
        for r in &self.records {
            for (t, c) in total.iter_mut().zip(&r.chosen_counts) {
                *t += c;
            }
        }
        total
    }
}

/// Result of a neural training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The trainer's output model.
    pub model: Classifier,
    /// θ_1..θ_T.
    pub snapshots: Vec<ParamSnapshot>,
    pub log: TrainLog,
}

impl TrainOutcome {
    /// The last `h` snapshots.
    pub fn window(&self, h: usize) -> &[ParamSnapshot] {
        &self.snapshots[self.snapshots.len().saturating_sub(h)..]
    }
}

/// `w / Σ w` for strictly positive weights.
pub fn normalize(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::Empty("weight vector"));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(Error::invalid("normalize_weights", format!("weight {w} is not positive")));
    }
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Normalized arm weights `p_i = w_i / Σ_j w_j`.
pub fn normalize_weights(arms: &[LossArm]) -> Result<Vec<f64>> {
    normalize(&arms.iter().map(|a| a.weight).collect::<Vec<_>>())
}

/// `w_i ← w_i·exp(η·loss_i)`, then rescales so the weights sum to `k`.
pub fn multiplicative_update(weights: &mut [f64], losses: &[f64], eta: f64) -> Result<()> {
    if losses.len() != weights.len() {
        return Err(Error::shape("weight update", &[weights.len()], &[losses.len()]));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::invalid("weight update", format!("eta {eta} must be ≥ 0")));
    }
    if let Some(l) = losses.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::invalid("weight update", format!("loss {l} must be finite and ≥ 0")));
    }
    // Subtracting the largest exponent keeps every factor in (0, 1]; the
    // common factor cancels in the rescale below.
    let top = losses.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(eta * l));
    let mut next: Vec<f64> = weights.iter().zip(losses).map(|(w, l)| w * (eta * l - top).exp()).collect();
    let total: f64 = next.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::NonFinite("multiplicative weights"));
    }
    let k = weights.len() as f64;
    for w in &mut next {
        *w = (*w * k / total).max(f64::MIN_POSITIVE);
    }
    weights.copy_from_slice(&next);
    Ok(())
}

/// Multiplicative update of the arms' weights.
pub fn mwu_weight_update(arms: &mut [LossArm], losses: &[f64], eta: f64) -> Result<()> {
    let mut w: Vec<f64> = arms.iter().map(|a| a.weight).collect();
    multiplicative_update(&mut w, losses, eta)?;
    for (a, w) in arms.iter_mut().zip(w) {
        a.weight = w;
    }
    Ok(())
}

fn check_distribution(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::Empty("distribution"));
    }
    if p.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(Error::invalid("distribution", format!("{p:?} has a negative or non-finite entry")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("distribution", format!("{p:?} sums to {total}")));
    }
    Ok(())
}

/// Draws index `i` with probability `p_i`.
pub fn sample_arm<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> Result<usize> {
    check_distribution(p)?;
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            cumulative += pi;
            last = i;
            if u < cumulative {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

/// Mean robust loss of every arm over `data` with its training attack.
pub fn validation_losses(model: &Classifier, arms: &[LossArm], data: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    arms.iter()
        .map(|arm| {
            let mut total = 0.0;
            for chunk in data.chunks(batch_size) {
                let (x, y) = chunk?;
                total += attack(model, &arm.space, &x, &y, &arm.attack)?.losses.iter().sum::<f64>();
            }
            Ok(total / data.len() as f64)
        })
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

enum Rule {
    Mwu,
    RoundRobin,
    Greedy,
}

fn check_inputs(arms: &[LossArm], data: &DatasetSplit, config: &MwuConfig) -> Result<()> {
    config.validate()?;
    if arms.is_empty() {
        return Err(Error::Empty("arm set"));
    }
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(Error::Empty("training or validation data"));
    }
    Ok(())
}

/// Fraction of ε used after `progress` epochs of a `warmup`-epoch ramp.
fn warmup_fraction(progress: f64, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        (progress / warmup as f64).min(1.0)
    }
}

/// Mixes a batch counter into an attack seed so restarts differ per batch.
fn batch_seed(base: u64, counter: u64) -> u64 {
    base ^ counter.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn drive(model: &mut Classifier, arms: &mut [LossArm], data: &DatasetSplit, config: &MwuConfig, rule: Rule) -> Result<(Vec<ParamSnapshot>, TrainLog)> {
    check_inputs(arms, data, config)?;
    let k = arms.len();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut arm_rng = ChaCha8Rng::seed_from_u64(config.seed);
    arm_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut next_round_robin = 0usize;
    let mut batch_counter = 0u64;
    let mut greedy_losses = match rule {
        Rule::Greedy => Some(validation_losses(model, arms, &data.validation, config.batch_size)?),
        _ => None,
    };
    let mut snapshots = Vec::with_capacity(config.steps);
    let mut log = TrainLog::default();

    for t in 1..=config.steps {
        let p = match (&rule, &greedy_losses) {
            (Rule::Mwu, _) => normalize_weights(arms)?,
            (Rule::Greedy, Some(losses)) => {
                let mut p = vec![0.0; k];
                p[argmax_first(losses)] = 1.0;
                p
            }
            _ => vec![1.0 / k as f64; k],
        };
        let mut counts = vec![0usize; k];
        for e in 0..config.epochs_per_step {
            order.shuffle(&mut shuffle_rng);
            let epoch = ((t - 1) * config.epochs_per_step + e) as f64;
            let batches = order.len().div_ceil(config.batch_size) as f64;
            for (j, batch) in order.chunks(config.batch_size).enumerate() {
                let i = match rule {
                    Rule::Mwu => sample_arm(&p, &mut arm_rng)?,
                    Rule::RoundRobin => {
                        let i = next_round_robin;
                        next_round_robin = (next_round_robin + 1) % k;
                        i
                    }
                    Rule::Greedy => argmax_first(&p),
                };
                counts[i] += 1;
                let (x, y) = data.train.batch(batch)?;
                let mut spec = arms[i].attack.clone().with_seed(batch_seed(arms[i].attack.seed, batch_counter));
                let frac = warmup_fraction(epoch + (j + 1) as f64 / batches, config.epsilon_warmup);
                spec.epsilon *= frac;
                spec.step_size *= frac;
                batch_counter += 1;
                let adv = attack(model, &arms[i].space, &x, &y, &spec)?.adversarial;
                let (_, grad) = model.loss_and_grad(&adv, &y)?;
                model.sgd_step(&grad, config.learning_rate)?;
            }
        }
        if !model.params().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("parameters after training step"));
        }
        snapshots.push(model.snapshot(t));
        let val = validation_losses(model, arms, &data.validation, config.batch_size)?;
        match rule {
            Rule::Mwu => {
                let capped: Vec<f64> = val.iter().map(|l| l.clamp(0.0, LOSS_CAP)).collect();
                mwu_weight_update(arms, &capped, config.eta)?;
            }
            Rule::Greedy => greedy_losses = Some(val.clone()),
            Rule::RoundRobin => {}
        }
        log.records.push(StepRecord {
            step: t,
            p,
            val_losses: val,
            chosen_counts: counts,
            snapshot_id: t,
        });
    }
    Ok((snapshots, log))
}

/// Scalable multiplicative weights: arms are sampled per mini-batch from the
/// current weights, which are updated from validation losses after every
/// step. Returns the average of the last `h` snapshots.
pub fn train_mwu_scalable(model: &Classifier, arms: &mut [LossArm], data: &DatasetSplit, config: &MwuConfig) -> Result<TrainOutcome> {
    let mut m = model.clone();
    let (snapshots, log) = drive(&mut m, arms, data, config, Rule::Mwu)?;
    let model = average_params(&snapshots[snapshots.len() - config.window..])?;
    Ok(TrainOutcome { model, snapshots, log })
}

/// Cycles through the arms one mini-batch at a time; returns θ_T.
pub fn train_round_robin(model: &Classifier, arms: &mut [LossArm], data: &DatasetSplit, config: &MwuConfig) -> Result<TrainOutcome> {
    let mut m = model.clone();
    let (snapshots, log) = drive(&mut m, arms, data, config, Rule::RoundRobin)?;
    Ok(TrainOutcome { model: m, snapshots, log })
}

/// Each step trains only on the arm with the largest validation loss (ties
/// to the lowest index); returns θ_T.
pub fn train_greedy(model: &Classifier, arms: &mut [LossArm], data: &DatasetSplit, config: &MwuConfig) -> Result<TrainOutcome> {
    let mut m = model.clone();
    let (snapshots, log) = drive(&mut m, arms, data, config, Rule::Greedy)?;
    Ok(TrainOutcome { model: m, snapshots, log })
}

/// Standard adversarial training on one arm; returns θ_T.
pub fn train_single(model: &Classifier, arm: &LossArm, data: &DatasetSplit, config: &MwuConfig) -> Result<TrainOutcome> {
    let mut m = model.clone();
    let mut arms = [arm.clone()];
    arms[0].reset_weight();
    let (snapshots, log) = drive(&mut m, &mut arms, data, config, Rule::Mwu)?;
    Ok(TrainOutcome { model: m, snapshots, log })
}

/// Solves the weighted problem `min_θ Σ_i p_i L_i(θ)` to within some δ.
pub trait CostSensitiveOracle {
    type Solution: Clone;

    fn num_losses(&self) -> usize;

    fn solve(&mut self, p: &[f64]) -> Result<Self::Solution>;

    /// `[L_1(θ), …, L_k(θ)]`.
    fn losses(&self, solution: &Self::Solution) -> Result<Vec<f64>>;
}

/// Trace of the exact loop.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactMwuTrace<S> {
    /// θ_1..θ_T; the output is the uniform distribution over them.
    pub solutions: Vec<S>,
    /// p_1..p_T.
    pub p: Vec<Vec<f64>>,
    /// `L(θ_t)` for every step.
    pub losses: Vec<Vec<f64>>,
}

impl<S> ExactMwuTrace<S> {
    /// `E_{θ~P} L_i(θ)` for the uniform distribution over the steps.
    pub fn expected_losses(&self) -> Vec<f64> {
        let k = self.losses.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; k];
        for row in &self.losses {
            for (m, l) in mean.iter_mut().zip(row) {
                *m += l;
            }
        }
        let t = self.losses.len() as f64;
        mean.iter_mut().for_each(|m| *m /= t);
        mean
    }
}

/// The literal multiplicative-weights loop: θ_t from the oracle at the
/// normalized weights, then a full-loss multiplicative update. Losses are
/// used as given and must lie in `[0, cap]`.
pub fn train_mwu_exact<O: CostSensitiveOracle>(oracle: &mut O, eta: f64, steps: usize, cap: f64) -> Result<ExactMwuTrace<O::Solution>> {
    let k = oracle.num_losses();
    if k == 0 {
        return Err(Error::Empty("loss set"));
    }
    if steps == 0 {
        return Err(Error::invalid("train_mwu_exact", "steps must be ≥ 1"));
    }
    let mut weights = vec![1.0; k];
    let mut trace = ExactMwuTrace {
        solutions: Vec::with_capacity(steps),
        p: Vec::with_capacity(steps),
        losses: Vec::with_capacity(steps),
    };
    for _ in 0..steps {
        let p = normalize(&weights)?;
        let theta = oracle.solve(&p)?;
        let losses = oracle.losses(&theta)?;
        if losses.len() != k {
            return Err(Error::shape("oracle losses", &[k], &[losses.len()]));
        }
        if let Some(l) = losses.iter().find(|l| !(**l >= 0.0 && **l <= cap)) {
            return Err(Error::invalid("train_mwu_exact", format!("loss {l} outside [0, {cap}]")));
        }
        multiplicative_update(&mut weights, &losses, eta)?;
        trace.solutions.push(theta);
        trace.p.push(p);
        trace.losses.push(losses);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::Norm;
    use crate::model::{Architecture, Layer};
    use crate::repspace::identity_space;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::Rng;

    fn arms(k: usize) -> Vec<LossArm> {
        (0..k)
            .map(|i| LossArm::new(i, identity_space(), AttackSpec::new(Norm::Linf, 0.1 * (i + 1) as f64, 1)))
            .collect()
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize_weights(&arms(4)).unwrap(), vec![0.25; 4]);
        let p = normalize(&[2.0, 1.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(normalize(&[1.0, 0.0]).is_err());
        assert!(normalize(&[1.0, -1.0]).is_err());
        assert!(normalize(&[]).is_err());
    }

    #[test]
    fn update_cases() {
        let mut a = arms(2);
        mwu_weight_update(&mut a, &[1.0, 0.0], 2f64.ln()).unwrap();
        let p = normalize_weights(&a).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!((a[0].weight() + a[1].weight() - 2.0).abs() < 1e-12);

        let mut w = vec![0.3, 1.2, 1.5];
        let before = normalize(&w).unwrap();
        multiplicative_update(&mut w, &[0.5, 1.0, 2.0], 0.0).unwrap();
        for (a, b) in normalize(&w).unwrap().iter().zip(&before) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut w = vec![0.3, 1.2, 1.5];
        multiplicative_update(&mut w, &[4.0; 3], 0.7).unwrap();
        for (a, b) in normalize(&w).unwrap().iter().zip(&before) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(multiplicative_update(&mut w, &[f64::NAN, 0.0, 0.0], 0.1).is_err());
        assert!(multiplicative_update(&mut w, &[-1.0, 0.0, 0.0], 0.1).is_err());
        assert!(multiplicative_update(&mut w, &[1.0], 0.1).is_err());
    }

    /// Thousands of updates with large losses would overflow without the
    /// rescale.
    #[test]
    fn long_runs_stay_finite() {
        let mut w = vec![1.0, 1.0];
        for _ in 0..100_000 {
            multiplicative_update(&mut w, &[10.0, 0.0], 1.0).unwrap();
        }
        assert!(w.iter().all(|v| v.is_finite() && *v > 0.0));
        let p = normalize(&w).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalization_is_scale_invariant(
            w in prop::collection::vec(0.01f64..100.0, 1..8),
            c in 0.001f64..1000.0,
        ) {
            let p = normalize(&w).unwrap();
            let scaled: Vec<f64> = w.iter().map(|v| v * c).collect();
            let q = normalize(&scaled).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOLERANCE);
        }

        #[test]
        fn updates_keep_weights_positive_and_p_on_simplex(
            losses in prop::collection::vec(prop::collection::vec(0.0f64..10.0, 4), 1..50),
            eta in 0.0f64..2.0,
        ) {
            let mut w = vec![1.0; 4];
            for l in &losses {
                multiplicative_update(&mut w, l, eta).unwrap();
                prop_assert!(w.iter().all(|v| *v > 0.0));
                let p = normalize(&w).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOLERANCE);
            }
        }

        #[test]
        fn sampling_ignores_weight_scale(w in prop::collection::vec(0.1f64..10.0, 2..6), seed in 0u64..100) {
            let p = normalize(&w).unwrap();
            let q = normalize(&w.iter().map(|v| v * 7.0).collect::<Vec<_>>()).unwrap();
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..50 {
                prop_assert_eq!(sample_arm(&p, &mut r1).unwrap(), sample_arm(&q, &mut r2).unwrap());
            }
        }
    }

    #[test]
    fn sampling_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            assert_eq!(sample_arm(&[1.0, 0.0, 0.0], &mut rng).unwrap(), 0);
            assert_eq!(sample_arm(&[0.0, 0.0, 1.0], &mut rng).unwrap(), 2);
        }
        let hits = (0..10_000).filter(|_| sample_arm(&[0.5, 0.5], &mut rng).unwrap() == 0).count();
        assert!((hits as f64 / 10_000.0 - 0.5).abs() <= 0.02, "{hits}");
        let draws = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| sample_arm(&[0.2, 0.3, 0.5], &mut r).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draws(5), draws(5));
        assert!(sample_arm(&[0.5, 0.6], &mut rng).is_err());
        assert!(sample_arm(&[1.5, -0.5], &mut rng).is_err());
        assert!(sample_arm(&[], &mut rng).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax_first(&[2.0, 2.0]), 0);
    }

    #[test]
    fn config_validation() {
        assert!(MwuConfig::default().validate().is_ok());
        for bad in [
            MwuConfig { window: 0, ..Default::default() },
            MwuConfig { window: 21, ..Default::default() },
            MwuConfig { steps: 0, ..Default::default() },
            MwuConfig { batch_size: 0, ..Default::default() },
            MwuConfig { eta: -1.0, ..Default::default() },
            MwuConfig { learning_rate: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn trainlog_round_trips_as_jsonl() {
        let log = TrainLog {
            records: vec![
                StepRecord {
                    step: 1,
                    p: vec![0.5, 0.5],
                    val_losses: vec![1.25, 0.5],
                    chosen_counts: vec![3, 4],
                    snapshot_id: 1,
                },
                StepRecord {
                    step: 2,
                    p: vec![0.6, 0.4],
                    val_losses: vec![1.0, 0.75],
                    chosen_counts: vec![5, 2],
                    snapshot_id: 2,
                },
            ],
        };
        let text = log.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("{\"step\":1,\"p\":[0.5,0.5],"));
        assert_eq!(TrainLog::from_jsonl(&text).unwrap(), log);
        assert_eq!(log.total_counts(), vec![8, 6]);
    }

    /// Two Gaussian-ish blobs in 2-D, one pixel per channel.
    fn toy_split(n: usize, seed: u64) -> DatasetSplit {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            let centre = if y == 0 { 0.3 } else { 0.7 };
            data.push((centre + rng.random_range(-0.15..0.15f64)).clamp(0.0, 1.0));
            data.push(rng.random_range(0.0..1.0f64));
            labels.push(y);
        }
        let d = Dataset::new(Tensor::new(vec![n, 1, 1, 2], data).unwrap(), labels).unwrap();
        let test = d.take(10).unwrap();
        DatasetSplit::new(&d, test, seed).unwrap()
    }

    fn linear_model() -> Classifier {
        let arch = Architecture::new([1, 1, 2], vec![Layer::Flatten, Layer::Dense { units: 2 }]).unwrap();
        Classifier::he_init(arch, 1)
    }

    fn small_config() -> MwuConfig {
        MwuConfig {
            eta: 0.5,
            steps: 3,
            epochs_per_step: 2,
            window: 2,
            batch_size: 16,
            learning_rate: 0.5,
            seed: 9,
            epsilon_warmup: 0,
        }
    }

    #[test]
    fn one_arm_mwu_equals_single_arm_training() {
        let data = toy_split(100, 1);
        let mut a = arms(1);
        let mwu = train_mwu_scalable(&linear_model(), &mut a, &data, &MwuConfig { window: 1, ..small_config() }).unwrap();
        let single = train_single(&linear_model(), &arms(1)[0], &data, &MwuConfig { window: 1, ..small_config() }).unwrap();
        assert_eq!(mwu.log, single.log);
        assert_eq!(mwu.model.params(), single.model.params());
        assert!(mwu.log.records.iter().all(|r| r.p == vec![1.0]));
    }

    #[test]
    fn one_arm_round_robin_and_greedy_match_single() {
        let data = toy_split(100, 2);
        let cfg = small_config();
        let single = train_single(&linear_model(), &arms(1)[0], &data, &cfg).unwrap();
        let rr = train_round_robin(&linear_model(), &mut arms(1), &data, &cfg).unwrap();
        let greedy = train_greedy(&linear_model(), &mut arms(1), &data, &cfg).unwrap();
        assert_eq!(rr.model.params(), single.model.params());
        assert_eq!(greedy.model.params(), single.model.params());
    }

    #[test]
    fn warmup_ramp() {
        assert_eq!(warmup_fraction(3.0, 0), 1.0);
        assert_eq!(warmup_fraction(0.5, 2), 0.25);
        assert_eq!(warmup_fraction(7.0, 2), 1.0);
        let data = toy_split(100, 2);
        let cfg = MwuConfig { epsilon_warmup: 2, ..small_config() };
        let ramped = train_single(&linear_model(), &arms(1)[0], &data, &cfg).unwrap();
        let plain = train_single(&linear_model(), &arms(1)[0], &data, &small_config()).unwrap();
        assert_ne!(ramped.model.params(), plain.model.params());
        let mut a = arms(1);
        let mwu = train_mwu_scalable(&linear_model(), &mut a, &data, &MwuConfig { window: 1, ..cfg.clone() }).unwrap();
        let single = train_single(&linear_model(), &arms(1)[0], &data, &MwuConfig { window: 1, ..cfg }).unwrap();
        assert_eq!(mwu.log, single.log);
    }

    #[test]
    fn zero_eta_keeps_p_uniform() {
        let data = toy_split(100, 3);
        let mut a = arms(3);
        let out = train_mwu_scalable(&linear_model(), &mut a, &data, &MwuConfig { eta: 0.0, ..small_config() }).unwrap();
        for r in &out.log.records {
            assert_eq!(r.p, vec![1.0 / 3.0; 3]);
        }
    }

    #[test]
    fn mwu_output_is_window_average_and_log_is_complete() {
        let data = toy_split(100, 4);
        let cfg = small_config();
        let mut a = arms(2);
        let out = train_mwu_scalable(&linear_model(), &mut a, &data, &cfg).unwrap();
        assert_eq!(out.snapshots.len(), 3);
        assert_eq!(out.model, average_params(out.window(2)).unwrap());
        let batches_per_step = cfg.epochs_per_step * data.train.len().div_ceil(cfg.batch_size);
        for (t, r) in out.log.records.iter().enumerate() {
            assert_eq!(r.step, t + 1);
            assert_eq!(r.snapshot_id, t + 1);
            assert_eq!(r.chosen_counts.iter().sum::<usize>(), batches_per_step);
            assert!((r.p.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOLERANCE);
        }
        // p_{t+1} follows from p_t and the capped validation losses at θ_t.
        for pair in out.log.records.windows(2) {
            let mut w = pair[0].p.clone();
            multiplicative_update(&mut w, &pair[0].val_losses, cfg.eta).unwrap();
            for (a, b) in normalize(&w).unwrap().iter().zip(&pair[1].p) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_step_window_returns_the_snapshot() {
        let data = toy_split(60, 5);
        let cfg = MwuConfig { steps: 1, window: 1, ..small_config() };
        let out = train_mwu_scalable(&linear_model(), &mut arms(2), &data, &cfg).unwrap();
        assert_eq!(out.model.params(), out.snapshots[0].params());
    }

    #[test]
    fn training_is_reproducible() {
        let data = toy_split(80, 6);
        let run = || train_mwu_scalable(&linear_model(), &mut arms(3), &data, &small_config()).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.log, b.log);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn round_robin_counts_cycle() {
        let data = toy_split(70, 7);
        // 63 training examples, batch 9 → 7 batches per epoch.
        let cfg = MwuConfig {
            steps: 1,
            epochs_per_step: 1,
            window: 1,
            batch_size: 9,
            ..small_config()
        };
        let out = train_round_robin(&linear_model(), &mut arms(3), &data, &cfg).unwrap();
        assert_eq!(out.log.records[0].chosen_counts, vec![3, 2, 2]);
        let cfg = MwuConfig { steps: 4, window: 1, ..cfg };
        let out = train_round_robin(&linear_model(), &mut arms(3), &data, &cfg).unwrap();
        let totals = out.log.total_counts();
        assert!(totals.iter().max().unwrap() - totals.iter().min().unwrap() <= 1);
    }

    #[test]
    fn greedy_picks_the_persistently_worst_arm() {
        // Arm 1 attacks with a radius so large the loss stays far above the
        // clean arm 0 whatever the model does.
        let data = toy_split(100, 8);
        let mut a = vec![
            LossArm::new(0, identity_space(), AttackSpec::new(Norm::Linf, 0.0, 0)),
            LossArm::new(1, identity_space(), AttackSpec::new(Norm::Linf, 1.0, 1)),
        ];
        let out = train_greedy(&linear_model(), &mut a, &data, &small_config()).unwrap();
        for r in &out.log.records {
            assert!(r.val_losses[1] > r.val_losses[0]);
            assert_eq!(r.p, vec![0.0, 1.0]);
            assert_eq!(r.chosen_counts[0], 0);
        }
    }

    #[test]
    fn greedy_tie_selects_first_arm() {
        let data = toy_split(60, 9);
        let same = AttackSpec::new(Norm::Linf, 0.1, 1);
        let mut a = vec![
            LossArm::new(0, identity_space(), same.clone()),
            LossArm::new(1, identity_space(), same),
        ];
        let out = train_greedy(&linear_model(), &mut a, &data, &MwuConfig { steps: 1, window: 1, ..small_config() }).unwrap();
        assert_eq!(out.log.records[0].p, vec![1.0, 0.0]);
    }

    #[test]
    fn empty_arm_set_is_rejected() {
        let data = toy_split(40, 10);
        assert!(train_mwu_scalable(&linear_model(), &mut [], &data, &small_config()).is_err());
    }

    struct TableOracle {
        table: Vec<Vec<f64>>,
    }

    impl CostSensitiveOracle for TableOracle {
        type Solution = usize;

        fn num_losses(&self) -> usize {
            self.table[0].len()
        }

        fn solve(&mut self, p: &[f64]) -> Result<usize> {
            let cost = |r: &Vec<f64>| r.iter().zip(p).map(|(l, q)| l * q).sum::<f64>();
            Ok((0..self.table.len()).fold(0, |b, r| if cost(&self.table[r]) < cost(&self.table[b]) { r } else { b }))
        }

        fn losses(&self, s: &usize) -> Result<Vec<f64>> {
            Ok(self.table[*s].clone())
        }
    }

    #[test]
    fn exact_loop_degenerate_cases() {
        let mut o = TableOracle {
            table: vec![vec![0.7], vec![0.2], vec![0.9]],
        };
        let trace = train_mwu_exact(&mut o, 0.1, 5, 1.0).unwrap();
        assert_eq!(trace.solutions, vec![1; 5]);
        assert_eq!(trace.expected_losses(), vec![0.2]);

        let mut o = TableOracle {
            table: vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        };
        let trace = train_mwu_exact(&mut o, 0.1, 1, 1.0).unwrap();
        assert_eq!(trace.solutions, vec![0]);
        assert!(train_mwu_exact(&mut o, 0.1, 0, 1.0).is_err());
        assert!(train_mwu_exact(&mut o, 0.1, 3, 0.5).is_err());
    }
}
