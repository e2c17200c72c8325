use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated an operation's precondition (shape, range, emptiness).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of its allowed domain.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A checkpoint was written for a different network configuration.
    #[error("checkpoint fingerprint {found} does not match configuration fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },

    /// A checkpoint or data file is malformed.
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// Training produced a non-finite loss.
    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

macro_rules! ensure_input {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::InvalidInput(format!($($arg)+)));
        }
    };
}

pub(crate) use ensure_input;
