//! Dense tensors and reverse-mode automatic differentiation.

mod kernels;
mod tape;
mod value;

pub use tape::{concat, Gradients, Tape, Var};
pub use value::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("{0}")]
    Contract(String),
}
