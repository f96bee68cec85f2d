//! Training engine for decoupled neural interfaces: networks whose modules
//! learn from synthetic gradients (and optionally synthetic inputs) instead of
//! waiting on a full backward pass.

pub mod bp_lambda;
mod error;
pub mod ff;
pub mod harness;
pub mod layers;
pub mod multinet;
pub mod numerics;
pub mod rnn;
pub mod synthetic;
pub mod tasks;

pub use error::{Error, Result};
