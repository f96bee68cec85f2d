//! Differentiable building blocks with hand-derived backward passes.
//!
//! Every forward returns a cache that the matching backward consumes; the
//! backward reads the layer's *current* parameters, so it must run before
//! the layer is updated.

mod activation;
mod batchnorm;
pub mod fault;
mod linear;
mod loss;
mod lstm;
mod standardize;

pub use activation::{relu_backward, relu_forward, sigmoid, ReluCache};
pub use batchnorm::{BatchNormCache, BatchNormGrads, BatchNormLayer, BnMode};
pub use linear::{Init, LinearCache, LinearGrads, LinearLayer};
pub use loss::{argmax_rows, l2_loss, masked_softmax_xent, sigmoid_bce, softmax_xent};
pub use lstm::{LstmCache, LstmCore, LstmGrads, LstmStepGrads};
pub use standardize::{standardize_backward, standardize_forward, StandardizeCache};
