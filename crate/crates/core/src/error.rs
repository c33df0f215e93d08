use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = QflowError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QflowError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("backward called on {0} without a cached forward pass")]
    NoCachedForward(String),

    #[error("forward called on {0} while a previous cached forward is still pending backward")]
    ReentrantForward(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("warmup not met: buffer holds {size} transitions, need {required}")]
    WarmupNotMet { size: usize, required: usize },

    #[error("invalid config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("checkpoint fragment `{key}`: {message}")]
    Checkpoint { key: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl QflowError {
    pub(crate) fn dims(context: impl Into<String>, expected: usize, found: usize) -> Self {
        QflowError::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        QflowError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QflowError::Io {
            path: path.into(),
            source,
        }
    }
}
