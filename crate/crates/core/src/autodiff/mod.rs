//! Dense tensors, reverse-mode differentiation, smooth-L1 loss and AdamW.

mod optim;
mod tape;
mod tensor;

pub use optim::{AdamW, AdamWConfig};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    BadShape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("expected a single-element tensor, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward called on an empty or foreign tape")]
    EmptyTape,
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}
