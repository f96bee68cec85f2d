//! Feed-forward classifiers trained with exact backprop, BP(λ), synthetic
//! gradients, stochastic asynchronous updates, complete unlock, and stale
//! gradients.

mod network;
mod steps;
mod train;

pub use network::{Block, BlockCache, BlockGrads, FfNetwork, FfSpec, Placement};
pub use steps::{
    backprop_step, bp_lambda_step, complete_unlock_step, dni_step, dni_step_with_hook,
    gradient_diagnostics, stale_gradient_step, stochastic_backprop_step, stochastic_dni_step,
    true_interface_grads, GradDiagnostics, StaleGradientCache, TrainStepReport, UpdateScheduler,
};
pub use train::{FfMode, FfTrainConfig, FfTrainer};
