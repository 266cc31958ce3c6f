use thiserror::Error;

use crate::graph::NodeId;

pub type Result<T> = std::result::Result<T, AdError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("data length {len} does not fill shape {shape:?}")]
    BadData { shape: [usize; 2], len: usize },
    #[error("non-finite value produced by {op} at node {node:?}")]
    NonFinite { op: &'static str, node: NodeId },
    #[error("backward root must be a 1x1 scalar, got {shape:?}")]
    NonScalarRoot { shape: [usize; 2] },
    #[error("index {index} out of range for {op} over {len} entries")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
}
