use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    Numeric { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("invalid argument: {0}")]
    Domain(String),

    #[error("gradient check: {0}")]
    GradCheck(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable code used by the command line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::Numeric { .. } => "E_NUMERIC",
            Error::Backward(_) => "E_BACKWARD",
            Error::Domain(_) => "E_DOMAIN",
            Error::GradCheck(_) => "E_GRADCHECK",
            Error::Config(_) => "E_CONFIG",
            Error::Data(_) => "E_DATA",
            Error::Parse { .. } => "E_PARSE",
            Error::Io { .. } => "E_IO",
            Error::Checkpoint(_) => "E_CHECKPOINT",
        }
    }
}
