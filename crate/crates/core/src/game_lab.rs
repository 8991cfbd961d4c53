//! Finite zero-sum games between a row player choosing θ and a column player
//! choosing a loss `L_i`, used to check the multiplicative-weights guarantee
//! exactly.
//!
//! The oracle solves the weighted problem by enumeration, so every quantity
//! in the regret argument can be computed and compared directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainers::{train_mwu_exact, CostSensitiveOracle};

/// Slack allowed on every checked inequality.
pub const CHECK_SLACK: f64 = 1e-9;

/// `m × k` loss matrix with entries in `[0, R]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixGame {
    rows: usize,
    cols: usize,
    bound: f64,
    losses: Vec<f64>,
}

impl MatrixGame {
    /// `losses` is row-major: entry `(θ, i)` at `θ·k + i`.
    pub fn new(rows: usize, cols: usize, losses: Vec<f64>, bound: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("matrix game", "needs at least one row and one column"));
        }
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::invalid("matrix game", format!("bound {bound} must be > 0")));
        }
        if losses.len() != rows * cols {
            return Err(Error::shape("matrix game", &[rows, cols], &[losses.len()]));
        }
        if let Some(v) = losses.iter().find(|v| !(**v >= 0.0 && **v <= bound)) {
            return Err(Error::invalid("matrix game", format!("entry {v} outside [0, {bound}]")));
        }
        Ok(MatrixGame {
            rows,
            cols,
            bound,
            losses,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], bound: f64) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("matrix game", "rows have different lengths"));
        }
        Self::new(rows.len(), cols, rows.concat(), bound)
    }

    /// Entries drawn uniformly from `[0, bound]`.
    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Result<Self> {
        let losses = (0..rows * cols).map(|_| rng.random_range(0.0..=bound)).collect();
        Self::new(rows, cols, losses, bound)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// The loss bound `R`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn entry(&self, row: usize, col: usize) -> f64 {
        self.losses[row * self.cols + col]
    }

    /// `[L_1(θ), …, L_k(θ)]` for row θ.
    pub fn row(&self, row: usize) -> &[f64] {
        &self.losses[row * self.cols..(row + 1) * self.cols]
    }

    /// `Σ_i p_i·M[row, i]`.
    pub fn weighted(&self, row: usize, p: &[f64]) -> f64 {
        self.row(row).iter().zip(p).map(|(l, q)| l * q).sum()
    }

    /// Column `i` of the result is column `perm[i]` of `self`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.cols];
        if perm.len() != self.cols || perm.iter().any(|&c| c >= self.cols || std::mem::replace(&mut seen[c], true)) {
            return Err(Error::invalid("permute_columns", format!("{perm:?} is not a permutation")));
        }
        let losses = (0..self.rows)
            .flat_map(|r| perm.iter().map(move |&c| (r, c)))
            .map(|(r, c)| self.entry(r, c))
            .collect();
        Self::new(self.rows, self.cols, losses, self.bound)
    }

    fn check_distribution(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.cols {
            return Err(Error::shape("column distribution", &[self.cols], &[p.len()]));
        }
        let total: f64 = p.iter().sum();
        if p.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("column distribution", format!("{p:?} is not a distribution")));
        }
        Ok(())
    }
}

/// Additive error δ of the weighted-problem oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSlack {
    delta: f64,
    /// Return the worst row whose weighted loss is still within δ of the
    /// optimum, instead of the optimum itself.
    adversarial: bool,
}

impl OracleSlack {
    pub fn exact() -> Self {
        OracleSlack {
            delta: 0.0,
            adversarial: false,
        }
    }

    /// An oracle that uses all of its slack δ against the learner.
    pub fn adversarial(delta: f64) -> Result<Self> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::invalid("oracle slack", format!("delta {delta} must be ≥ 0")));
        }
        Ok(OracleSlack {
            delta,
            adversarial: true,
        })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// `argmin_θ Σ_i p_i·M[θ, i]`, ties to the lowest row.
pub fn exact_cost_sensitive_oracle(game: &MatrixGame, p: &[f64]) -> Result<usize> {
    game.check_distribution(p)?;
    let mut best = 0;
    let mut best_cost = game.weighted(0, p);
    for r in 1..game.rows {
        let c = game.weighted(r, p);
        if c < best_cost {
            best = r;
            best_cost = c;
        }
    }
    Ok(best)
}

/// Oracle answer under `slack`: the exact minimizer, or in adversarial mode
/// the highest-cost row within δ of the minimum (ties to the lowest row).
pub fn slack_oracle(game: &MatrixGame, p: &[f64], slack: OracleSlack) -> Result<usize> {
    let exact = exact_cost_sensitive_oracle(game, p)?;
    if !slack.adversarial || slack.delta == 0.0 {
        return Ok(exact);
    }
    let limit = game.weighted(exact, p) + slack.delta;
    let mut worst = exact;
    let mut worst_cost = game.weighted(exact, p);
    for r in 0..game.rows {
        let c = game.weighted(r, p);
        if c <= limit && c > worst_cost {
            worst = r;
            worst_cost = c;
        }
    }
    Ok(worst)
}

/// `min_θ max_i M[θ, i]` and the lowest row attaining it.
pub fn pure_minimax(game: &MatrixGame) -> (f64, usize) {
    let worst = |r: usize| game.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best = 0;
    let mut value = worst(0);
    for r in 1..game.rows {
        let w = worst(r);
        if w < value {
            best = r;
            value = w;
        }
    }
    (value, best)
}

/// Uniform distribution over the selected rows (with multiplicity).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedSolution {
    pub rows: Vec<usize>,
    /// `E_{θ~P} L_i(θ)` for every column.
    pub expected_losses: Vec<f64>,
}

impl MixedSolution {
    /// Probability of every row of the game.
    pub fn distribution(&self, num_rows: usize) -> Vec<f64> {
        let mut d = vec![0.0; num_rows];
        let w = 1.0 / self.rows.len() as f64;
        for &r in &self.rows {
            d[r] += w;
        }
        d
    }

    /// `max_i E_{θ~P} L_i(θ)`.
    pub fn worst_expected(&self) -> f64 {
        self.expected_losses.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `p_t` and θ_t for every step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameTrace {
    pub p: Vec<Vec<f64>>,
    pub rows: Vec<usize>,
    pub slack: OracleSlack,
}

struct GameOracle<'a> {
    game: &'a MatrixGame,
    slack: OracleSlack,
}

impl CostSensitiveOracle for GameOracle<'_> {
    type Solution = usize;

    fn num_losses(&self) -> usize {
        self.game.cols
    }

    fn solve(&mut self, p: &[f64]) -> Result<usize> {
        slack_oracle(self.game, p, self.slack)
    }

    fn losses(&self, row: &usize) -> Result<Vec<f64>> {
        Ok(self.game.row(*row).to_vec())
    }
}

/// Multiplicative weights over the columns with the game's own oracle.
pub fn run_mwu_on_game(game: &MatrixGame, eta: f64, steps: usize, slack: OracleSlack) -> Result<(MixedSolution, GameTrace)> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::invalid("run_mwu_on_game", format!("eta {eta} must be > 0")));
    }
    let mut oracle = GameOracle { game, slack };
    let trace = train_mwu_exact(&mut oracle, eta, steps, game.bound)?;
    let expected_losses = trace.expected_losses();
    Ok((
        MixedSolution {
            rows: trace.solutions.clone(),
            expected_losses,
        },
        GameTrace {
            p: trace.p,
            rows: trace.solutions,
            slack,
        },
    ))
}

/// `η = ε/(2R)` and `T = ⌈16·R²·ln(max(k, 2))/ε²⌉`.
pub fn minimax_schedule(eps: f64, bound: f64, cols: usize) -> (f64, usize) {
    let eta = eps / (2.0 * bound);
    let steps = (16.0 * bound * bound * (cols.max(2) as f64).ln() / (eps * eps)).ceil() as usize;
    (eta, steps)
}

/// One game's check of `max_i E_{θ~P} L_i(θ) ≤ min_θ max_i L_i(θ) + ε + δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinimaxReport {
    pub minimax: f64,
    pub achieved: f64,
    pub eps: f64,
    pub delta: f64,
    /// `minimax + ε + δ − achieved`; non-negative on success.
    pub margin: f64,
    #[serde(rename = "T")]
    pub steps: usize,
    pub eta: f64,
    pub pass: bool,
}

pub fn verify_minimax_bound(game: &MatrixGame, eps: f64, slack: OracleSlack) -> Result<(MinimaxReport, MixedSolution, GameTrace)> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid("verify_minimax_bound", format!("eps {eps} must be > 0")));
    }
    let (eta, steps) = minimax_schedule(eps, game.bound, game.cols);
    let (solution, trace) = run_mwu_on_game(game, eta, steps, slack)?;
    let (minimax, _) = pure_minimax(game);
    let achieved = solution.worst_expected();
    let margin = minimax + eps + slack.delta - achieved;
    let report = MinimaxReport {
        minimax,
        achieved,
        eps,
        delta: slack.delta,
        margin,
        steps,
        eta,
        pass: margin >= 0.0,
    };
    Ok((report, solution, trace))
}

/// Tightest margins of the two inequality families of the regret argument.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    /// `min_i [(1/T)Σ_t p_t·L(θ_t) − ((1−η)(1/T)Σ_t L_i(θ_t) − 2R·ln k/(ηT))]`.
    pub no_regret_margin: f64,
    /// `min_t [min_θ p_t·L(θ) + δ − p_t·L(θ_t)]`.
    pub oracle_margin: f64,
    pub no_regret_pass: bool,
    pub oracle_pass: bool,
}

impl RegretReport {
    pub fn pass(&self) -> bool {
        self.no_regret_pass && self.oracle_pass
    }
}

/// Checks the no-regret bound for every column and the oracle inequality
/// for every step, each to [`CHECK_SLACK`].
///
/// The no-regret bound is checked in the form
/// `(1/T)Σ_t p_t·L(θ_t) ≥ (1−η)(1/T)Σ_t L_i(θ_t) − 2R·ln k/(ηT)`, which
/// follows from the standard analysis whenever `1/2 ≤ R ≤ 2`.
pub fn verify_regret_chain(trace: &GameTrace, game: &MatrixGame, eta: f64) -> Result<RegretReport> {
    let t = trace.rows.len();
    if t == 0 || trace.p.len() != t {
        return Err(Error::invalid("verify_regret_chain", "trace is empty or inconsistent"));
    }
    if !(eta > 0.0) {
        return Err(Error::invalid("verify_regret_chain", format!("eta {eta} must be > 0")));
    }
    let k = game.cols;
    let tf = t as f64;
    let learner: f64 = trace.p.iter().zip(&trace.rows).map(|(p, &r)| game.weighted(r, p)).sum::<f64>() / tf;
    let penalty = 2.0 * game.bound * (k as f64).ln() / (eta * tf);
    let mut no_regret = f64::INFINITY;
    for i in 0..k {
        let column: f64 = trace.rows.iter().map(|&r| game.entry(r, i)).sum::<f64>() / tf;
        no_regret = no_regret.min(learner - ((1.0 - eta) * column - penalty));
    }
    let mut oracle = f64::INFINITY;
    for (p, &r) in trace.p.iter().zip(&trace.rows) {
        let best = (0..game.rows).map(|row| game.weighted(row, p)).fold(f64::INFINITY, f64::min);
        oracle = oracle.min(best + trace.slack.delta - game.weighted(r, p));
    }
    Ok(RegretReport {
        no_regret_margin: no_regret,
        oracle_margin: oracle,
        no_regret_pass: no_regret >= -CHECK_SLACK,
        oracle_pass: oracle >= -CHECK_SLACK,
    })
}

/// Seeded games with `1..=max_rows` rows, `1..=max_cols` columns and entries
/// uniform in `[0, 1]`.
pub fn random_game_suite(count: usize, max_rows: usize, max_cols: usize, seed: u64) -> Result<Vec<MatrixGame>> {
    (0..count as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i));
            let m = rng.random_range(1..=max_rows);
            let k = rng.random_range(1..=max_cols);
            MatrixGame::random(m, k, 1.0, &mut rng)
        })
        .collect()
}

/// Per-game results of the whole verification suite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameCheck {
    #[serde(flatten)]
    pub minimax: MinimaxReport,
    pub regret: RegretReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub games: Vec<GameCheck>,
    pub passed: usize,
    pub total: usize,
    pub pass: bool,
}

/// Runs the minimax-bound check and the regret chain on every game.
pub fn verify_suite(games: &[MatrixGame], eps: f64, slack: OracleSlack) -> Result<SuiteReport> {
    let mut checks = Vec::with_capacity(games.len());
    for game in games {
        let (minimax, _, trace) = verify_minimax_bound(game, eps, slack)?;
        let regret = verify_regret_chain(&trace, game, minimax.eta)?;
        checks.push(GameCheck { minimax, regret });
    }
    let passed = checks.iter().filter(|c| c.minimax.pass && c.regret.pass()).count();
    Ok(SuiteReport {
        total: checks.len(),
        pass: passed == checks.len(),
        passed,
        games: checks,
    })
}

/// A game whose rows are linear softmax classifiers and whose columns are
/// worst-case losses over finite perturbation grids, so the loss is convex
/// in the model's output distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexGame {
    pub features: usize,
    pub classes: usize,
    pub points: Vec<(Vec<f64>, usize)>,
    /// Each row: `W` (`classes × features`, row-major) followed by `b`.
    pub thetas: Vec<Vec<f64>>,
    /// One perturbation grid per column.
    pub grids: Vec<Vec<Vec<f64>>>,
}

/// `{−ε, 0, ε}^features`.
pub fn linf_grid(features: usize, eps: f64) -> Vec<Vec<f64>> {
    let mut grid = vec![Vec::new()];
    for _ in 0..features {
        grid = grid
            .into_iter()
            .flat_map(|g| {
                [-eps, 0.0, eps].into_iter().map(move |d| {
                    let mut h = g.clone();
                    h.push(d);
                    h
                })
            })
            .collect();
    }
    grid
}

impl ConvexGame {
    /// Random points, random classifiers, and one `3^features`-point ℓ∞
    /// grid per entry of `radii`.
    pub fn random(features: usize, classes: usize, points: usize, rows: usize, radii: &[f64], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..points)
            .map(|_| {
                let x = (0..features).map(|_| rng.random_range(-1.0..1.0)).collect();
                (x, rng.random_range(0..classes))
            })
            .collect();
        let thetas = (0..rows)
            .map(|_| (0..classes * (features + 1)).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let grids = radii.iter().map(|&e| linf_grid(features, e)).collect();
        ConvexGame {
            features,
            classes,
            points,
            thetas,
            grids,
        }
    }

    fn probs(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let (w, b) = theta.split_at(self.classes * self.features);
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| b[c] + w[c * self.features..(c + 1) * self.features].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    /// Worst-case cross-entropy of the averaged output distribution of
    /// `members` under column `col`'s grid, averaged over the points.
    pub fn ensemble_loss(&self, members: &[usize], col: usize) -> f64 {
        let mut total = 0.0;
        for (x, y) in &self.points {
            let mut worst = f64::NEG_INFINITY;
            for d in &self.grids[col] {
                let xp: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + b).collect();
                let mean: f64 =
                    members.iter().map(|&m| self.probs(&self.thetas[m], &xp)[*y]).sum::<f64>() / members.len() as f64;
                worst = worst.max(-mean.ln());
            }
            total += worst;
        }
        total / self.points.len() as f64
    }

    /// `L_col(θ_row)`.
    pub fn loss(&self, row: usize, col: usize) -> f64 {
        self.ensemble_loss(&[row], col)
    }

    /// The exact loss table, with `R` set to its largest entry.
    pub fn to_matrix_game(&self) -> Result<MatrixGame> {
        let losses: Vec<f64> = (0..self.thetas.len())
            .flat_map(|r| (0..self.grids.len()).map(move |c| (r, c)))
            .map(|(r, c)| self.loss(r, c))
            .collect();
        let bound = losses.iter().copied().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        MatrixGame::new(self.thetas.len(), self.grids.len(), losses, bound)
    }
}

/// Per-column comparison of the ensemble loss with the expected member loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexReport {
    pub ensemble_losses: Vec<f64>,
    pub expected_losses: Vec<f64>,
    /// `min_i [E_{θ~P} L_i(θ) − L_i(ensemble)]`.
    pub margin: f64,
    pub pass: bool,
}

/// Checks `L_i(f_θ̂) ≤ E_{θ~P} L_i(θ)` for every column, where `f_θ̂`
/// averages the members' output distributions.
pub fn verify_convex_ensemble(trace: &GameTrace, game: &ConvexGame) -> Result<ConvexReport> {
    if trace.rows.is_empty() {
        return Err(Error::Empty("trace"));
    }
    let cols = game.grids.len();
    let ensemble_losses: Vec<f64> = (0..cols).map(|c| game.ensemble_loss(&trace.rows, c)).collect();
    let expected_losses: Vec<f64> = (0..cols)
        .map(|c| trace.rows.iter().map(|&r| game.loss(r, c)).sum::<f64>() / trace.rows.len() as f64)
        .collect();
    let margin = expected_losses
        .iter()
        .zip(&ensemble_losses)
        .map(|(e, l)| e - l)
        .fold(f64::INFINITY, f64::min);
    Ok(ConvexReport {
        ensemble_losses,
        expected_losses,
        margin,
        pass: margin >= -CHECK_SLACK,
    })
}
