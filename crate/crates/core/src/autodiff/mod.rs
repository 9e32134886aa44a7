//! Dense tensors with tape-based reverse-mode automatic differentiation.

pub mod check;
mod graph;
mod ops;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
