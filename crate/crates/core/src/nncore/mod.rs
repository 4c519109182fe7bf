//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every primitive records a backward rule on the [`Tape`]; [`grad_check`]
//! compares the resulting gradients with central finite differences.

mod gradcheck;
mod rng;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, GradCheckReport};
pub use rng::SeededRng;
pub use tape::{sigmoid, BackwardFn, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    RateOutOfRange(f64),
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("axis {axis} out of range for {ndim}-d tensor")]
    AxisOutOfRange { axis: usize, ndim: usize },
    #[error("slice {start}+{len} exceeds extent {extent}")]
    SliceOutOfRange { start: usize, len: usize, extent: usize },
    #[error("concat of zero tensors")]
    EmptyConcat,
}
