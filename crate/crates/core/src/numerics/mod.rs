//! Dense f64 tensors, the seeded generator, Adam, and the finite-difference
//! oracle that the rest of the crate is tested against.

mod adam;
mod gradcheck;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, Param};
pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use rng::RngState;
pub use tensor::{gemm, gemm_acc, Tensor};
