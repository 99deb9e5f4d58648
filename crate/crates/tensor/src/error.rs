use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Precondition { op: &'static str, msg: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape; call zero_grad first")]
    BackwardAlreadyRun,
    #[error("function under gradient check is not deterministic")]
    NonDeterministic,
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn precondition(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Precondition {
        op,
        msg: msg.into(),
    }
}
