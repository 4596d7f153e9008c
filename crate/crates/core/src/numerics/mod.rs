//! Dense `f64` tensors and the reverse-mode graph every model op is built on.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Var};
pub use kernels::Activation;
pub use tensor::{ParamId, ParamStore, Tensor};

/// Layer-norm epsilon used throughout the model.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod tests;
