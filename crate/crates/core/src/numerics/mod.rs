//! Dense arrays, the neural kernels used by the interpreter, and a
//! reverse-mode tape that differentiates only with respect to leaf
//! parameters.

mod array;
pub mod gradcheck;
pub mod kernels;
mod tape;

pub use array::{RealArray, Real};
pub use kernels::{attention, cosine_similarity, gelu, layer_norm, matmul, softmax, LAYER_NORM_EPS};
pub use tape::{grad, BackwardFault, Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: zero-norm input")]
    ZeroNorm { op: &'static str },
    #[error("attention: every key position is masked for query row {row}")]
    AllMasked { row: usize },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("variable {0} is not on this tape")]
    UnknownVar(usize),
    #[error("variable {0} is not a leaf parameter")]
    NotALeaf(usize),
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
}

pub type Result<T> = std::result::Result<T, NumericsError>;
