//! First-order inner maximization: PGD for ℓ∞/ℓ2 balls and SLIDE for ℓ1
//! balls, run in the coordinates of any [`RepresentationSpace`].
//!
//! Every attack works on a batch. Each example is perturbed independently:
//! the batch loss is a mean, so per-example input gradients only differ by
//! the common factor `1/N`, which the sign, unit-norm and top-k steps ignore.
//!
//! Iterates live in coefficient space around `R(x)`; the pixel image is
//! `clip(R⁻¹(z), 0, 1)`, clipped once after the final step. Restart 0 starts
//! at `R(x)` itself, later restarts start from a uniform point of the ball.
//! The returned example is the highest-loss candidate among the clean input
//! and the end point of every restart (ties keep the earlier candidate).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Predictor;
use crate::repspace::RepresentationSpace;
use crate::tensor::{cross_entropy_per_example, Graph, Tensor};
use crate::trainers::LossArm;

/// Relative slack allowed on ball membership.
pub const BALL_TOLERANCE: f64 = 1e-9;

/// Default fraction of coordinates SLIDE steps on.
pub const DEFAULT_SPARSITY: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
    Linf,
}

impl Norm {
    pub fn name(self) -> &'static str {
        match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }

    /// `‖v‖_p` of a flat slice.
    pub fn measure(self, v: &[f64]) -> f64 {
        match self {
            Norm::L1 => v.iter().map(|x| x.abs()).sum(),
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            "linf" | "l_inf" | "inf" => Ok(Norm::Linf),
            other => Err(Error::invalid("norm", format!("unknown norm {other:?}"))),
        }
    }
}

/// Parameters of one attack run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub norm: Norm,
    /// Radius ε of the ball.
    pub epsilon: f64,
    /// Number of ascent steps ℓ.
    pub steps: usize,
    pub step_size: f64,
    pub restarts: usize,
    /// Fraction of coordinates SLIDE moves per step; ignored by PGD.
    pub sparsity_fraction: f64,
    pub seed: u64,
}

/// `2.5·ε/ℓ`, or 0 when there are no steps.
pub fn default_step_size(epsilon: f64, steps: usize) -> f64 {
    if steps == 0 {
        0.0
    } else {
        2.5 * epsilon / steps as f64
    }
}

impl AttackSpec {
    pub fn new(norm: Norm, epsilon: f64, steps: usize) -> Self {
        AttackSpec {
            norm,
            epsilon,
            steps,
            step_size: default_step_size(epsilon, steps),
            restarts: 1,
            sparsity_fraction: DEFAULT_SPARSITY,
            seed: 0,
        }
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.step_size = step_size;
        self
    }

    pub fn with_sparsity(mut self, fraction: f64) -> Self {
        self.sparsity_fraction = fraction;
        self
    }

    /// Same attack with a different step count and the default step size
    /// for it.
    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self.step_size = default_step_size(self.epsilon, steps);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid("attack spec", format!("epsilon {} must be ≥ 0", self.epsilon)));
        }
        if self.steps > 0 && self.epsilon > 0.0 && !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(
                "attack spec",
                format!("step size {} must be > 0 when steps > 0", self.step_size),
            ));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("attack spec", "restarts must be ≥ 1"));
        }
        if !(self.sparsity_fraction > 0.0 && self.sparsity_fraction <= 1.0) {
            return Err(Error::invalid(
                "attack spec",
                format!("sparsity fraction {} outside (0, 1]", self.sparsity_fraction),
            ));
        }
        Ok(())
    }
}

/// `{z : ‖z − center‖_p ≤ ε}` in some representation space.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationBall {
    pub center: Tensor,
    pub norm: Norm,
    pub epsilon: f64,
}

impl PerturbationBall {
    pub fn new(center: Tensor, norm: Norm, epsilon: f64) -> Result<Self> {
        check_eps(epsilon, "perturbation ball")?;
        Ok(PerturbationBall { center, norm, epsilon })
    }

    /// Membership up to [`BALL_TOLERANCE`] relative slack.
    pub fn contains(&self, z: &Tensor) -> Result<bool> {
        if z.shape() != self.center.shape() {
            return Err(Error::shape("ball contains", z.shape(), self.center.shape()));
        }
        let d: Vec<f64> = z.data().iter().zip(self.center.data()).map(|(a, b)| a - b).collect();
        Ok(self.norm.measure(&d) <= self.epsilon * (1.0 + BALL_TOLERANCE))
    }

    pub fn project(&self, z: &Tensor) -> Result<Tensor> {
        match self.norm {
            Norm::L1 => project_l1(z, &self.center, self.epsilon),
            Norm::L2 => project_l2(z, &self.center, self.epsilon),
            Norm::Linf => project_linf(z, &self.center, self.epsilon),
        }
    }
}

fn check_eps(eps: f64, op: &'static str) -> Result<()> {
    if eps >= 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(op, format!("radius {eps} must be a finite value ≥ 0")))
    }
}

fn projected(
    z: &Tensor,
    center: &Tensor,
    eps: f64,
    op: &'static str,
    f: fn(&mut [f64], &[f64], f64),
) -> Result<Tensor> {
    check_eps(eps, op)?;
    if z.shape() != center.shape() {
        return Err(Error::shape(op, z.shape(), center.shape()));
    }
    let mut out = z.clone();
    f(out.data_mut(), center.data(), eps);
    Ok(out)
}

/// Coordinatewise clamp into `[center − ε, center + ε]`.
pub fn project_linf(z: &Tensor, center: &Tensor, eps: f64) -> Result<Tensor> {
    projected(z, center, eps, "project_linf", project_linf_slice)
}

/// Radial shrink onto the ℓ2 ball when outside it.
pub fn project_l2(z: &Tensor, center: &Tensor, eps: f64) -> Result<Tensor> {
    projected(z, center, eps, "project_l2", project_l2_slice)
}

/// Euclidean projection onto the ℓ1 ball (sort-and-threshold).
pub fn project_l1(z: &Tensor, center: &Tensor, eps: f64) -> Result<Tensor> {
    projected(z, center, eps, "project_l1", project_l1_slice)
}

pub(crate) fn project_linf_slice(z: &mut [f64], center: &[f64], eps: f64) {
    for (v, c) in z.iter_mut().zip(center) {
        *v = v.clamp(c - eps, c + eps);
    }
}

pub(crate) fn project_l2_slice(z: &mut [f64], center: &[f64], eps: f64) {
    let dist = z.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    if dist <= eps {
        return;
    }
    let scale = eps / dist;
    for (v, c) in z.iter_mut().zip(center) {
        *v = c + (*v - c) * scale;
    }
}

pub(crate) fn project_l1_slice(z: &mut [f64], center: &[f64], eps: f64) {
    let d: Vec<f64> = z.iter().zip(center).map(|(a, b)| a - b).collect();
    let l1: f64 = d.iter().map(|v| v.abs()).sum();
    if l1 <= eps {
        return;
    }
    if eps == 0.0 {
        z.copy_from_slice(center);
        return;
    }
    let mut mags: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut tau = 0.0;
    for (j, &u) in mags.iter().enumerate() {
        cumulative += u;
        let candidate = (cumulative - eps) / (j + 1) as f64;
        if u - candidate > 0.0 {
            tau = candidate;
        } else {
            break;
        }
    }
    for ((v, c), di) in z.iter_mut().zip(center).zip(&d) {
        *v = c + di.signum() * (di.abs() - tau).max(0.0);
    }
}

fn project_slice(norm: Norm, z: &mut [f64], center: &[f64], eps: f64) {
    match norm {
        Norm::L1 => project_l1_slice(z, center, eps),
        Norm::L2 => project_l2_slice(z, center, eps),
        Norm::Linf => project_linf_slice(z, center, eps),
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Everything an attack produced for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    /// Adversarial pixels, `N×H×W×C`, in `[0, 1]`.
    pub adversarial: Tensor,
    /// Coefficient-space point each adversarial example came from.
    pub coefficients: Tensor,
    /// `R(x)`: the ball centres.
    pub centers: Tensor,
    /// Cross-entropy of each returned example.
    pub losses: Vec<f64>,
}

fn as_batch<P: Predictor + ?Sized>(model: &P, x: &Tensor) -> Result<Tensor> {
    let [h, w, c] = model.input_shape();
    match x.shape() {
        [a, b, d] if [*a, *b, *d] == [h, w, c] => Ok(x.clone().unsqueeze_leading()),
        [_, a, b, d] if [*a, *b, *d] == [h, w, c] => Ok(x.clone()),
        other => Err(Error::shape("attack input", other, &[h, w, c])),
    }
}

/// Gradient of the batch loss with respect to coefficient-space inputs.
fn coefficient_gradient<P: Predictor + ?Sized>(
    model: &P,
    space: &RepresentationSpace,
    z: &Tensor,
    labels: &[usize],
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let zv = g.param(z.clone());
    let xv = space.inverse_var(&mut g, zv)?;
    let scores = model.scores_var(&mut g, xv)?;
    let loss = g.softmax_cross_entropy(scores, labels)?;
    g.backward(loss)?;
    Ok(g.grad(zv).expect("param grad").to_vec())
}

fn losses_at<P: Predictor + ?Sized>(model: &P, x: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    cross_entropy_per_example(&model.scores(x)?, labels)
}

/// Uniform sample from the ball of radius `eps` (centred at 0) in `d` dims.
fn sample_in_ball(norm: Norm, eps: f64, out: &mut [f64], rng: &mut ChaCha8Rng) {
    let d = out.len();
    match norm {
        Norm::Linf => out.iter_mut().for_each(|v| *v = rng.random_range(-eps..=eps)),
        Norm::L2 => {
            let mut sq = 0.0;
            for v in out.iter_mut() {
                *v = StandardNormal.sample(rng);
                sq += *v * *v;
            }
            let radius = eps * rng.random::<f64>().powf(1.0 / d as f64);
            let scale = if sq > 0.0 { radius / sq.sqrt() } else { 0.0 };
            out.iter_mut().for_each(|v| *v *= scale);
        }
        Norm::L1 => {
            // Exponential spacings give a uniform point of the simplex
            // interior; random signs spread it over the cross-polytope.
            let mut total = 0.0;
            for v in out.iter_mut() {
                let e: f64 = Exp1.sample(rng);
                *v = if rng.random::<bool>() { e } else { -e };
                total += e;
            }
            let tail: f64 = Exp1.sample(rng);
            total += tail;
            out.iter_mut().for_each(|v| *v *= eps / total);
        }
    }
}

fn ascent_step(spec: &AttackSpec, z: &mut [f64], grad: &[f64], scratch: &mut Vec<usize>) {
    match spec.norm {
        Norm::Linf => {
            for (v, g) in z.iter_mut().zip(grad) {
                *v += spec.step_size * sign(*g);
            }
        }
        Norm::L2 => {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (v, g) in z.iter_mut().zip(grad) {
                    *v += spec.step_size * g / norm;
                }
            }
        }
        Norm::L1 => {
            let d = grad.len();
            let count = ((spec.sparsity_fraction * d as f64).ceil() as usize).clamp(1, d);
            scratch.clear();
            scratch.extend(0..d);
            scratch.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
            for &j in &scratch[..count] {
                z[j] += spec.step_size * sign(grad[j]);
            }
        }
    }
}

/// Runs the attack described by `spec` (PGD for ℓ2/ℓ∞, SLIDE for ℓ1) on a
/// single image or a batch.
pub fn attack<P: Predictor + ?Sized>(
    model: &P,
    space: &RepresentationSpace,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<AttackOutcome> {
    spec.validate()?;
    let x = as_batch(model, x)?;
    let n = x.shape()[0];
    if labels.len() != n {
        return Err(Error::shape("attack labels", x.shape(), &[labels.len()]));
    }
    let centers = space.forward(&x)?;
    let clean_losses = losses_at(model, &x, labels)?;
    if spec.steps == 0 || spec.epsilon == 0.0 {
        return Ok(AttackOutcome {
            adversarial: x,
            coefficients: centers.clone(),
            centers,
            losses: clean_losses,
        });
    }

    let d = x.len() / n;
    let mut best = x.clone();
    let mut best_z = centers.clone();
    let mut best_losses = clean_losses;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut scratch = Vec::new();

    for restart in 0..spec.restarts {
        let mut z = centers.clone();
        if restart > 0 {
            let mut noise = vec![0.0; d];
            for (zi, ci) in z.data_mut().chunks_exact_mut(d).zip(centers.data().chunks_exact(d)) {
                sample_in_ball(spec.norm, spec.epsilon, &mut noise, &mut rng);
                for ((v, c), e) in zi.iter_mut().zip(ci).zip(&noise) {
                    *v = c + e;
                }
                project_slice(spec.norm, zi, ci, spec.epsilon);
            }
        }
        for _ in 0..spec.steps {
            let grad = coefficient_gradient(model, space, &z, labels)?;
            for ((zi, gi), ci) in z
                .data_mut()
                .chunks_exact_mut(d)
                .zip(grad.chunks_exact(d))
                .zip(centers.data().chunks_exact(d))
            {
                ascent_step(spec, zi, gi, &mut scratch);
                project_slice(spec.norm, zi, ci, spec.epsilon);
            }
        }
        let mut candidate = space.inverse(&z)?;
        candidate.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        let losses = losses_at(model, &candidate, labels)?;
        for (e, &loss) in losses.iter().enumerate() {
            if loss > best_losses[e] {
                best_losses[e] = loss;
                best.data_mut()[e * d..(e + 1) * d].copy_from_slice(&candidate.data()[e * d..(e + 1) * d]);
                best_z.data_mut()[e * d..(e + 1) * d].copy_from_slice(&z.data()[e * d..(e + 1) * d]);
            }
        }
    }
    Ok(AttackOutcome {
        adversarial: best,
        coefficients: best_z,
        centers,
        losses: best_losses,
    })
}

/// Projected gradient ascent for ℓ∞ and ℓ2 balls; returns adversarial pixels
/// with the same shape as `x`.
pub fn pgd_attack<P: Predictor + ?Sized>(
    model: &P,
    space: &RepresentationSpace,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<Tensor> {
    if spec.norm == Norm::L1 {
        return Err(Error::invalid("pgd_attack", "ℓ1 balls are attacked with slide_attack"));
    }
    let out = attack(model, space, x, labels, spec)?;
    out.adversarial.reshape(x.shape())
}

/// Sparse ℓ1 ascent: step on the top `⌈q·d⌉` coordinates by `|gradient|`,
/// then project onto the ℓ1 ball.
pub fn slide_attack<P: Predictor + ?Sized>(
    model: &P,
    space: &RepresentationSpace,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
) -> Result<Tensor> {
    if spec.norm != Norm::L1 {
        return Err(Error::invalid("slide_attack", "SLIDE attacks ℓ1 balls only"));
    }
    let out = attack(model, space, x, labels, spec)?;
    out.adversarial.reshape(x.shape())
}

/// Empirical robust loss of one arm: mean cross-entropy over the batch after
/// the arm's training-strength attack.
pub fn robust_loss<P: Predictor + ?Sized>(model: &P, arm: &LossArm, x: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("robust_loss batch"));
    }
    let out = attack(model, &arm.space, x, labels, &arm.attack)?;
    Ok(out.losses.iter().sum::<f64>() / out.losses.len() as f64)
}
