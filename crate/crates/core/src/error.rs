use std::path::PathBuf;

use afcyte_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: malformed file: {reason}")]
    Format { context: String, reason: String },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("data validation: {0}")]
    Data(String),
    #[error("registration: {0}")]
    Registration(String),
    #[error("threshold: {0}")]
    Threshold(String),
    #[error("labeling: {0}")]
    Labeling(String),
    #[error("training diverged at epoch {epoch}, batch {batch} (lr {lr:e}): {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        lr: f64,
        detail: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Format {
            context: context.into(),
            reason: reason.into(),
        }
    }
}
