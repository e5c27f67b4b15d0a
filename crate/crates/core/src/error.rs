use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core numerics, matching, loss and evaluation code.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("positional encoding needs an even model dimension, got {0}")]
    OddDimension(usize),
    #[error("cannot assign {gts} ground truths to {preds} predictions")]
    RectangularInfeasible { gts: usize, preds: usize },
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("brute-force assignment limited to {limit} rows, got {rows}")]
    TooLarge { rows: usize, limit: usize },
    #[error("ground truth has no visible keypoints")]
    NoVisibleKeypoints,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed record: {0}")]
    Schema(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
}

pub type Result<T> = core::result::Result<T, Error>;
