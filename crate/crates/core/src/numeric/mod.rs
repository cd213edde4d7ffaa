//! Dense tensors, reverse-mode differentiation, Adam and a seedable PRNG.
//!
//! All arithmetic is `f64`. Tensors are immutable once recorded on a
//! [`Tape`]; a tape is owned by a single forward/backward pass.

mod adam;
mod prng;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use prng::Prng;
pub use tape::{Gradients, NodeId, OpKind, Tape, LAYER_NORM_EPS};
pub use tensor::{matmul, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("dimension error in {op}: input shapes {shapes:?}")]
    Dimension {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("row {row} has {len} values, expected {expected}")]
    RaggedRow {
        row: usize,
        len: usize,
        expected: usize,
    },
    #[error("backward needs a scalar loss node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite gradient for parameter `{name}`; update rejected")]
    NonFiniteGradient { name: String },
    #[error("optimizer state mismatch: {0}")]
    StateMismatch(String),
    #[error("invalid learning rate {0}")]
    LearningRate(f64),
}
