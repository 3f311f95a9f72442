use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch, {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid parameter: {reason}")]
    Parameter { op: &'static str, reason: String },
    #[error("{op}: target class {target} out of range for {classes} classes")]
    Label {
        op: &'static str,
        target: usize,
        classes: usize,
    },
    #[error("usage: {0}")]
    Usage(String),
    #[error("optimizer: {0}")]
    Optimizer(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn param_err(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::Parameter {
        op,
        reason: reason.into(),
    }
}
