//! Dense tensors and a define-by-run reverse-mode autodiff tape.

pub mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use graph::{Graph, Var, NORM_EPS};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
