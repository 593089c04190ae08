//! Dense matrices, SVD-based pseudo-inverse, and a small reverse-mode tape.

mod fd;
mod linalg;
mod matrix;
mod tape;

pub use fd::{finite_diff_grad, max_relative_error};
pub use linalg::{default_rcond, pinv, pinv_default, singular_values, svd, Svd};
pub use matrix::{Mask, Matrix, MASK_SENTINEL};
pub use tape::{sigmoid, sigmoid_cross_entropy, GradientMap, NodeId, ParamId, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    DataLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("row slice {start}..{end} out of range for {rows} rows")]
    SliceOutOfRange {
        start: usize,
        end: usize,
        rows: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(
        "SVD did not converge after {sweeps} sweeps (max off-diagonal cosine {off_diagonal:e})"
    )]
    SvdNoConvergence { sweeps: usize, off_diagonal: f64 },
    #[error("loss must be 1x1, got {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("parameter {0} was not recorded on the tape")]
    UnknownParam(String),
    #[error("no derivative rule for operator {0}")]
    UnsupportedOp(&'static str),
}

impl NumericsError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Self::Shape { op, left, right }
    }
}
