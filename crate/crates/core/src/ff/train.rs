use serde::{Deserialize, Serialize};

use super::network::{FfNetwork, FfSpec};
use super::steps::{
    backprop_step, complete_unlock_step, dni_step, stale_gradient_step, stochastic_backprop_step,
    stochastic_dni_step, StaleGradientCache, TrainStepReport, UpdateScheduler,
};
use crate::error::{Error, Result};
use crate::numerics::RngState;
use crate::tasks::MnistDataset;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FfMode {
    Backprop,
    Dni,
    /// Decoupled modules updated in random order with probability `p_update`.
    Stochastic { p_update: f64 },
    /// Backprop where each layer updates with probability `p_update` and a
    /// skipped layer blocks the gradient below it.
    StochasticBackprop { p_update: f64 },
    CompleteUnlock { p_update: f64 },
    Stale { decay: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfTrainConfig {
    pub spec: FfSpec,
    pub mode: FfMode,
    pub batch: usize,
    pub iterations: u64,
    /// Learning-rate drops by 10× at these fractions of `iterations`.
    pub lr_drops: Vec<f64>,
    /// Compute gradient diagnostics every this many iterations (0: never).
    pub diagnostics_every: u64,
}

/// Drives one feed-forward network over shuffled MNIST mini-batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfTrainer {
    pub config: FfTrainConfig,
    pub net: FfNetwork,
    pub step: u64,
    data_rng: RngState,
    sched: UpdateScheduler,
    stale: Option<StaleGradientCache>,
    order: Vec<usize>,
    cursor: usize,
}

impl FfTrainer {
    pub fn new(config: FfTrainConfig, seed: u64) -> Result<Self> {
        if config.batch < 2 {
            return Err(Error::Config("batch-normalised training needs batch ≥ 2".into()));
        }
        let root = RngState::new(seed);
        let net = FfNetwork::new(config.spec.clone(), &mut root.fork(0))?;
        let p = match config.mode {
            FfMode::Stochastic { p_update }
            | FfMode::StochasticBackprop { p_update }
            | FfMode::CompleteUnlock { p_update } => p_update,
            _ => 1.0,
        };
        let stale = match config.mode {
            FfMode::Stale { decay } => Some(StaleGradientCache::new(config.spec.layers - 1, decay)?),
            _ => None,
        };
        Ok(Self {
            sched: UpdateScheduler::new(p, root.fork(2))?,
            data_rng: root.fork(1),
            config,
            net,
            step: 0,
            stale,
            order: Vec::new(),
            cursor: 0,
        })
    }

    fn lr_at(&self, step: u64) -> f64 {
        let frac = step as f64 / self.config.iterations.max(1) as f64;
        let drops = self.config.lr_drops.iter().filter(|&&f| frac >= f).count();
        self.config.spec.adam.lr * 0.1f64.powi(drops as i32)
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut idx = Vec::with_capacity(self.config.batch);
        while idx.len() < self.config.batch {
            if self.cursor >= self.order.len() {
                self.order = self.data_rng.permutation(n);
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        idx
    }

    pub fn train_iter(&mut self, data: &MnistDataset) -> Result<TrainStepReport> {
        let lr = self.lr_at(self.step);
        self.net.set_lr(lr);
        let idx = self.next_batch(data.len());
        let (x, y) = data.batch(&idx);
        let diag = self.config.diagnostics_every > 0 && self.step % self.config.diagnostics_every == 0;
        let report = match self.config.mode {
            FfMode::Backprop => backprop_step(&mut self.net, &x, &y)?,
            FfMode::Dni => dni_step(&mut self.net, &x, &y, diag)?,
            FfMode::Stochastic { .. } => stochastic_dni_step(&mut self.net, &x, &y, &mut self.sched)?,
            FfMode::StochasticBackprop { .. } => {
                stochastic_backprop_step(&mut self.net, &x, &y, &mut self.sched)?
            }
            FfMode::CompleteUnlock { .. } => complete_unlock_step(&mut self.net, &x, &y, &mut self.sched)?,
            FfMode::Stale { .. } => {
                stale_gradient_step(&mut self.net, &x, &y, self.stale.as_mut().expect("built in new"))?
            }
        };
        self.step += 1;
        Ok(report)
    }

    /// Error rate on `data` with an eval-mode chained forward.
    pub fn evaluate(&mut self, data: &MnistDataset) -> Result<f64> {
        self.net.error_rate(&data.images, &data.labels, 1000)
    }
}
