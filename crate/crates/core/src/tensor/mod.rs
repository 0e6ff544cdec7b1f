//! Dense tensors with tape-based reverse-mode differentiation.

mod array;
mod ops;
mod optim;
mod real;
mod tape;

pub use array::Tensor;
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use real::Real;
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Clone, Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("expected a single-element tensor, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("variable was recorded on a different tape")]
    ForeignVar,
    #[error("non-finite gradient for parameter {index}")]
    NonFinite { index: usize },
}
