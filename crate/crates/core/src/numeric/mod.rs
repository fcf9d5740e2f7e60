//! Dense/sparse matrices, an expression graph with reverse-mode gradients,
//! Adam, and a finite-difference checker.

mod adam;
mod gradcheck;
mod graph;
mod matrix;
mod sparse;

pub use adam::{AdamState, DEFAULT_LEARNING_RATE};
pub use gradcheck::{finite_difference_check, finite_difference_check_sampled, GradCheckReport};
pub use graph::{sigmoid, softmax, Binder, ExpressionGraph, NodeId, Op, Values, BCE_CLAMP};
pub use matrix::DenseMatrix;
pub use sparse::SparseAdjacency;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("numeric overflow at node {0}")]
    Overflow(String),
    #[error("unbound input `{0}`")]
    Unbound(String),
    #[error("contract violation: {0}")]
    Contract(String),
}
