//! Tensors, reverse-mode differentiation, Adam and the PCG32 random stream.

mod adam;
pub mod gradcheck;
mod param;
mod rng;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::RngStream;
pub use tape::{evaluate_and_grad, Axis, Gradients, Tape, Var};
pub use tensor::Tensor;
