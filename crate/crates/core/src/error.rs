use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the screening pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error: missing image files for ids {0:?}")]
    Integrity(Vec<String>),

    #[error("data error: {0}")]
    Data(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    #[error("training error in parameter block `{block}`: {message}")]
    Training { block: String, message: String },

    #[error("embedding provider `{provider}` failed: {message}")]
    Provider { provider: String, message: String },

    #[error("remote detector error: {message}")]
    Remote {
        message: String,
        retry_after: Option<std::time::Duration>,
    },

    #[error("remote detector timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("degenerate attention map: {0}")]
    DegenerateMap(String),

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("bundle error: {0}")]
    Bundle(String),

    #[error("image decode error: {0}")]
    Decode(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
