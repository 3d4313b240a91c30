//! Dense arrays and a reverse-mode autodiff tape.

mod array;
mod graph;
pub mod io;

pub use array::{Array, Element, Precision, MAX_RANK};
pub use graph::{Graph, Var};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} elements")]
    ElementCount { shape: Vec<usize>, len: usize },
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("arrays are limited to {MAX_RANK} axes, got shape {0:?}")]
    Rank(Vec<usize>),
    #[error("index {index} out of range for axis of size {bound}")]
    Index { index: usize, bound: usize },
    #[error("backward called twice on the same graph without reset_grads")]
    BackwardTwice,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("array file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TensorError {
    pub(crate) fn shapes(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}
