use std::path::PathBuf;

use sbanet_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// True for malformed containers and bad input data.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Self::Data(_) | Self::Generation(_) | Self::Io { .. } | Self::Tensor(TensorError::Format { .. } | TensorError::Io(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Config(msg.into()))
}
