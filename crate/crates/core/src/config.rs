//! Run configuration, read from TOML. Unknown keys are rejected.
//!
//! ```toml
//! trainer = "mwu"
//! seeds = [0, 1, 2]
//! output = "runs/mwu"
//!
//! [data]
//! path = "data/mnist"
//! train_subset = 5000
//! test_subset = 1000
//!
//! [mwu]
//! steps = 20
//! epochs_per_step = 3
//!
//! [[arms]]
//! space = "pixel"
//! norm = "linf"
//! epsilon = 0.4
//! train_steps = 10
//! eval_steps = 40
//! ```
//!
//! With no `[[arms]]` the six default MNIST arms are used.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{AttackSpec, Norm, DEFAULT_SPARSITY};
use crate::error::{Error, Result};
use crate::model::{Architecture, Layer};
use crate::repspace::{dct2d_space, identity_space, RepresentationSpace};
use crate::trainers::{LossArm, MwuConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    Pixel,
    Dct,
}

impl SpaceKind {
    pub fn build(self, input_shape: [usize; 3]) -> Result<RepresentationSpace> {
        match self {
            SpaceKind::Pixel => Ok(identity_space()),
            SpaceKind::Dct => dct2d_space(input_shape[0], input_shape[1], input_shape[2]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerKind {
    Mwu,
    Greedy,
    RoundRobin,
    Single,
}

impl FromStr for TrainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mwu" => Ok(TrainerKind::Mwu),
            "greedy" => Ok(TrainerKind::Greedy),
            "round_robin" | "round-robin" => Ok(TrainerKind::RoundRobin),
            "single" => Ok(TrainerKind::Single),
            _ => Err(Error::Config(format!(
                "trainer: unknown trainer {s:?}, expected mwu, greedy, round_robin or single"
            ))),
        }
    }
}

impl fmt::Display for TrainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainerKind::Mwu => "mwu",
            TrainerKind::Greedy => "greedy",
            TrainerKind::RoundRobin => "round_robin",
            TrainerKind::Single => "single",
        })
    }
}

/// One loss arm: a perturbation ball in a representation space plus the
/// attack strengths used for training and for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub space: SpaceKind,
    pub norm: Norm,
    pub epsilon: f64,
    pub train_steps: usize,
    pub eval_steps: usize,
    #[serde(default = "default_sparsity")]
    pub sparsity: f64,
    #[serde(default)]
    pub name: Option<String>,
}

fn default_sparsity() -> f64 {
    DEFAULT_SPARSITY
}

impl ArmConfig {
    pub fn new(space: SpaceKind, norm: Norm, epsilon: f64, train_steps: usize, eval_steps: usize) -> Self {
        ArmConfig {
            space,
            norm,
            epsilon,
            train_steps,
            eval_steps,
            sparsity: DEFAULT_SPARSITY,
            name: None,
        }
    }

    /// Builds the arm; both attacks use step size `2.5ε/ℓ` for their own ℓ.
    pub fn build(&self, index: usize, input_shape: [usize; 3], eval_restarts: usize) -> Result<LossArm> {
        let space = self.space.build(input_shape)?;
        let train = AttackSpec::new(self.norm, self.epsilon, self.train_steps).with_sparsity(self.sparsity);
        let eval = AttackSpec::new(self.norm, self.epsilon, self.eval_steps)
            .with_sparsity(self.sparsity)
            .with_restarts(eval_restarts);
        train.validate()?;
        eval.validate()?;
        let arm = LossArm::new(index, space, train).with_eval_attack(eval);
        Ok(match &self.name {
            Some(n) => arm.with_name(n.clone()),
            None => arm,
        })
    }
}

/// {pixel, DCT} × {ℓ∞ 0.4, ℓ2 1, ℓ1 5}: 10 PGD / 20 SLIDE training steps and
/// 40 PGD / 100 SLIDE evaluation steps.
pub fn default_arm_configs_mnist() -> Vec<ArmConfig> {
    [SpaceKind::Pixel, SpaceKind::Dct]
        .into_iter()
        .flat_map(|s| {
            [
                ArmConfig::new(s, Norm::Linf, 0.4, 10, 40),
                ArmConfig::new(s, Norm::L2, 1.0, 10, 40),
                ArmConfig::new(s, Norm::L1, 5.0, 20, 100),
            ]
        })
        .collect()
}

/// The six default arms for 28×28×1 inputs.
pub fn default_arms_mnist() -> Vec<LossArm> {
    default_arm_configs_mnist()
        .iter()
        .enumerate()
        .map(|(i, a)| a.build(i, [28, 28, 1], 1).expect("default arms are valid"))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding the four MNIST IDX files (optionally gzipped).
    pub path: PathBuf,
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default = "default_trainer")]
    pub trainer: TrainerKind,
    #[serde(default)]
    pub mwu: MwuConfig,
    #[serde(default)]
    pub arms: Vec<ArmConfig>,
    /// Layer list; the desk CNN when absent.
    #[serde(default)]
    pub architecture: Option<Vec<Layer>>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Random restarts of the evaluation attacks.
    #[serde(default = "default_restarts")]
    pub eval_restarts: usize,
}

fn default_trainer() -> TrainerKind {
    TrainerKind::Mwu
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

fn default_restarts() -> usize {
    1
}

impl RunConfig {
    pub fn new(data_path: impl Into<PathBuf>) -> Self {
        RunConfig {
            data: DataConfig {
                path: data_path.into(),
                train_subset: None,
                test_subset: None,
                split_seed: 0,
            },
            trainer: default_trainer(),
            mwu: MwuConfig::default(),
            arms: Vec::new(),
            architecture: None,
            seeds: default_seeds(),
            output: default_output(),
            eval_restarts: default_restarts(),
        }
    }

    /// Parses and validates; relative data and output paths are resolved
    /// against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(base) = base {
            if cfg.data.path.is_relative() {
                cfg.data.path = base.join(&cfg.data.path);
            }
            if cfg.output.is_relative() {
                cfg.output = base.join(&cfg.output);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn arm_configs(&self) -> Vec<ArmConfig> {
        if self.arms.is_empty() {
            default_arm_configs_mnist()
        } else {
            self.arms.clone()
        }
    }

    pub fn architecture(&self, input_shape: [usize; 3], num_classes: usize) -> Result<Architecture> {
        match &self.architecture {
            Some(layers) => Architecture::new(input_shape, layers.clone()),
            None => Architecture::desk(input_shape, num_classes),
        }
    }

    pub fn build_arms(&self, input_shape: [usize; 3]) -> Result<Vec<LossArm>> {
        self.arm_configs()
            .iter()
            .enumerate()
            .map(|(i, a)| a.build(i, input_shape, self.eval_restarts))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.mwu.validate().map_err(|e| Error::Config(format!("mwu: {e}")))?;
        if self.seeds.is_empty() {
            return bad("seeds: at least one seed is required".into());
        }
        if self.eval_restarts == 0 {
            return bad("eval_restarts: must be ≥ 1".into());
        }
        if self.trainer == TrainerKind::Single && self.arm_configs().len() != 1 {
            return bad(format!("trainer: single needs exactly one arm, found {}", self.arm_configs().len()));
        }
        if matches!(self.data.train_subset, Some(n) if n < 10) {
            return bad("data.train_subset: must be ≥ 10".into());
        }
        if self.data.test_subset == Some(0) {
            return bad("data.test_subset: must be ≥ 1".into());
        }
        for (i, a) in self.arm_configs().iter().enumerate() {
            a.build(i, [28, 28, 1], self.eval_restarts)
                .map_err(|e| Error::Config(format!("arms[{i}]: {e}")))?;
        }
        if let Some(layers) = &self.architecture {
            Architecture::new([28, 28, 1], layers.clone()).map_err(|e| Error::Config(format!("architecture: {e}")))?;
        }
        Ok(())
    }
}
