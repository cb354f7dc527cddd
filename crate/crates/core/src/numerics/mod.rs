//! Dense tensors, reverse-mode differentiation over a closed operation set,
//! and the Adam optimizer.

mod adam;
mod graph;
mod ops;
mod real;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use ops::Padding;
pub(crate) use graph::{BackwardOp, GradSink};
pub use real::Real;
pub use tensor::Tensor;
