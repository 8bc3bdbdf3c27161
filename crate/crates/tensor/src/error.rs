use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("configuration error in {op}: {msg}")]
    Config { op: &'static str, msg: String },
    #[error("non-finite value produced by {op} (node {node})")]
    NonFinite { op: &'static str, node: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn cfg_err(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Config { op, msg: msg.into() }
}
