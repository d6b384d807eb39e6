use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The caller violated an operation's contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// An object was used before the state it needs existed.
    #[error("state error: {0}")]
    State(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("empty volume: {0}")]
    EmptyVolume(String),

    /// A file exists but its contents are malformed, truncated or fail their checksum.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
