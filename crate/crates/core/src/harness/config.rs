use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ff::{FfMode, FfSpec, FfTrainConfig, Placement};
use crate::multinet::TwoNetConfig;
use crate::numerics::AdamConfig;
use crate::rnn::TbpttConfig;
use crate::synthetic::SgConfig;

/// One experiment: what to train, for how long, where to write.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// In the experiment's natural unit: iterations for feed-forward runs,
    /// episodes for Copy tasks, windows for character streams, A-steps for
    /// the two-network system.
    pub budget: u64,
    pub out_dir: PathBuf,
    /// Write a metrics row whenever the step counter crosses a multiple of
    /// this.
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Also write `checkpoint.dni` at multiples of this (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: u64,
    pub experiment: Experiment,
}

fn default_log_every() -> u64 {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    FfMnist(FfExperiment),
    FfStochastic(FfExperiment),
    FfUnlock(FfExperiment),
    RnnCopy(RnnExperiment),
    RnnRepeat(RnnExperiment),
    RnnChars(CharExperiment),
    MultiNet(MultiExperiment),
    BpLambdaCheck(BpLambdaCheckConfig),
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::FfMnist(_) => "ff-mnist",
            Experiment::FfStochastic(_) => "ff-stochastic",
            Experiment::FfUnlock(_) => "ff-unlock",
            Experiment::RnnCopy(_) => "rnn-copy",
            Experiment::RnnRepeat(_) => "rnn-repeat",
            Experiment::RnnChars(_) => "rnn-chars",
            Experiment::MultiNet(_) => "multi-net",
            Experiment::BpLambdaCheck(_) => "bp-lambda-check",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FfExperiment {
    pub layers: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    pub placement: Placement,
    pub sg: SgConfig,
    #[serde(default)]
    pub synthetic_inputs: Option<SgConfig>,
    pub mode: FfMode,
    pub lr: f64,
    #[serde(default)]
    pub sg_lr: Option<f64>,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub lr_drops: Vec<f64>,
    #[serde(default)]
    pub diagnostics_every: u64,
    /// Evaluate on the test set every this many iterations (0: at the end).
    #[serde(default)]
    pub eval_every: u64,
    /// Use only the first `n` training / test images.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

fn default_hidden() -> usize {
    256
}

fn default_batch() -> usize {
    64
}

impl FfExperiment {
    pub fn train_config(&self, iterations: u64) -> FfTrainConfig {
        let mut spec = FfSpec::mnist(self.layers, self.placement.clone(), self.sg);
        spec.hidden = self.hidden;
        spec.synthetic_inputs = self.synthetic_inputs;
        spec.adam = AdamConfig::with_lr(self.lr);
        spec.sg_lr = self.sg_lr;
        FfTrainConfig {
            spec,
            mode: self.mode,
            batch: self.batch,
            iterations,
            lr_drops: self.lr_drops.clone(),
            diagnostics_every: self.diagnostics_every,
        }
    }
}

/// Copy and Repeat Copy. Desk-scale defaults: 64 units, batch 32, Adam 7e-5
/// (full scale is 256 units and batch 256).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RnnExperiment {
    #[serde(default = "default_units")]
    pub units: usize,
    #[serde(default = "default_rnn_batch")]
    pub batch: usize,
    #[serde(default = "default_rnn_lr")]
    pub lr: f64,
    pub tbptt: TbpttConfig,
}

fn default_units() -> usize {
    64
}

fn default_rnn_batch() -> usize {
    32
}

fn default_rnn_lr() -> f64 {
    7e-5
}

/// Next-character prediction on a plain byte file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharExperiment {
    pub path: PathBuf,
    #[serde(default = "default_units")]
    pub units: usize,
    #[serde(default = "default_rnn_batch")]
    pub batch: usize,
    #[serde(default = "default_char_lr")]
    pub lr: f64,
    pub tbptt: TbpttConfig,
}

fn default_char_lr() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiExperiment {
    pub net: TwoNetConfig,
    /// Evaluate every this many A-steps (0: at the end).
    #[serde(default)]
    pub eval_every: u64,
    #[serde(default = "default_eval_ticks")]
    pub eval_ticks: usize,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

fn default_eval_ticks() -> usize {
    200
}

/// Shared fixture for the recurrent BP(λ) against window-trainer check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpLambdaCheckConfig {
    pub t: usize,
    pub windows: usize,
    pub units: usize,
    pub batch: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        match &self.experiment {
            Experiment::FfMnist(f) | Experiment::FfStochastic(f) | Experiment::FfUnlock(f) => {
                f.train_config(self.budget).spec.validate()
            }
            Experiment::RnnCopy(r) | Experiment::RnnRepeat(r) => r.tbptt.validate(),
            Experiment::RnnChars(c) => c.tbptt.validate(),
            Experiment::MultiNet(m) => m.net.validate(),
            Experiment::BpLambdaCheck(b) => {
                if b.t < 2 || b.windows == 0 || b.batch == 0 || b.units == 0 {
                    Err(Error::Config("bp-lambda-check needs T ≥ 2 and a non-empty fixture".into()))
                } else {
                    Ok(())
                }
            }
        }
    }
}
