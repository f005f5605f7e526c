use thiserror::Error;

/// Errors raised by tensor construction, graph recording and backward passes.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(msg: impl Into<String>) -> TensorError {
    TensorError::Shape(msg.into())
}
