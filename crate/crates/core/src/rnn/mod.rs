//! Truncated-BPTT training of an LSTM with synthetic gradients bridging the
//! window boundaries, and the Copy-task curriculum runner.

pub mod crosscheck;
mod curriculum;
mod window;

pub use curriculum::{
    CurriculumRunner, OracleLearner, RandomLearner, TracePoint, WindowLearner, WindowOutcome,
};
pub use window::{
    apply_grads, output_loss, window_grads, window_step, OutputKind, RnnGrads, RnnModel,
    TbpttConfig, WindowReport, WindowState,
};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{AdamConfig, RngState, Tensor};

/// A model plus its carried window state: the learner the curriculum runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RnnTrainer {
    pub cfg: TbpttConfig,
    pub model: RnnModel,
    pub state: WindowState,
    pub last: Option<WindowReport>,
}

impl RnnTrainer {
    pub fn new(
        in_dim: usize,
        units: usize,
        out_dim: usize,
        batch: usize,
        cfg: TbpttConfig,
        adam: AdamConfig,
        rng: &mut RngState,
    ) -> Result<Self> {
        cfg.validate()?;
        let model = RnnModel::new(in_dim, units, out_dim, &cfg, rng, adam);
        Ok(Self {
            state: WindowState::new(batch, units),
            cfg,
            model,
            last: None,
        })
    }
}

impl WindowLearner for RnnTrainer {
    fn window(&mut self, xs: &[Tensor], ys: &[Tensor], weights: &[Vec<f64>]) -> Result<Vec<Tensor>> {
        let mut report = window_step(&mut self.model, &self.cfg, &mut self.state, xs, ys, weights)?;
        let probs = std::mem::take(&mut report.probs);
        self.last = Some(report);
        Ok(probs)
    }
}
