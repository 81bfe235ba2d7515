use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
    #[error("shapes {lhs:?} and {rhs:?} are not broadcast-compatible")]
    Broadcast { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("matmul inner extents differ: {lhs:?} x {rhs:?}")]
    MatmulShape { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Shape { op, msg: msg.into() }
}
