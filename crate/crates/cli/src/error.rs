use std::path::PathBuf;

use duosplat_core::Error as CoreError;
use thiserror::Error;

/// Process exit codes, one per failure category.
pub mod exit {
    /// Config file or input data violating its schema (unknown keys, bad values, mismatched shapes).
    pub const SCHEMA: u8 = 2;
    /// A required file is missing or unreadable.
    pub const INPUT: u8 = 3;
    /// A checkpoint was trained with a different network configuration.
    pub const FINGERPRINT: u8 = 4;
    pub const DIVERGED: u8 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self.exit_code() {
            exit::SCHEMA => "schema violation",
            exit::INPUT => "unreadable input",
            exit::FINGERPRINT => "fingerprint mismatch",
            exit::DIVERGED => "training diverged",
            _ => "error",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => exit::SCHEMA,
            CliError::Core(e) => match e {
                CoreError::InvalidInput(_) | CoreError::InvalidConfig(_) => exit::SCHEMA,
                CoreError::Io { .. } | CoreError::Format { .. } => exit::INPUT,
                CoreError::FingerprintMismatch { .. } => exit::FINGERPRINT,
                CoreError::Diverged { .. } => exit::DIVERGED,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_map_to_distinct_codes() {
        let io = std::io::Error::new(std::io::ErrorKind::NotFound, "gone");
        let cases = [
            (CliError::Usage("x".into()), exit::SCHEMA),
            (CoreError::InvalidInput("x".into()).into(), exit::SCHEMA),
            (CoreError::Io { path: "a".into(), source: io }.into(), exit::INPUT),
            (
                CoreError::FingerprintMismatch {
                    expected: "a".into(),
                    found: "b".into(),
                }
                .into(),
                exit::FINGERPRINT,
            ),
            (CoreError::Diverged { iteration: 3, loss: f64::NAN }.into(), exit::DIVERGED),
        ];
        for (e, code) in cases {
            assert_eq!(e.exit_code(), code, "{e}");
        }
    }
}
