use std::path::PathBuf;

/// Broad failure category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("domain `{0}` is not registered")]
    UnknownDomain(String),

    #[error("duplicate paper id `{0}`")]
    DuplicateId(String),

    #[error("requested {requested} negative pairs but only {available} eligible pairs exist")]
    InsufficientNegatives { requested: usize, available: usize },

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::UnknownDomain(_) => ErrorKind::Config,
            Error::Data(_)
            | Error::DuplicateId(_)
            | Error::InsufficientNegatives { .. }
            | Error::Checkpoint(_)
            | Error::Json(_) => ErrorKind::Data,
            Error::Shape { .. } | Error::Io { .. } | Error::Tensor(_) => ErrorKind::Runtime,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
