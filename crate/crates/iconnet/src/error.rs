//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The input signal is shorter than the kernel.
    #[error("signal too short: {len} samples, kernel needs at least {taps}")]
    SignalTooShort { len: usize, taps: usize },

    /// A file did not match the expected on-disk format. `section` names the
    /// offending chunk or field.
    #[error("format error in {section}: {message}")]
    Format { section: String, message: String },

    /// Checkpoint magic/version did not match what this build writes.
    #[error("checkpoint format version mismatch: {0}")]
    CheckpointVersion(String),

    /// Experiment configuration failed validation; message carries the field path.
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    /// A non-finite value showed up where the numerics must stay finite.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn format(section: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            section: section.into(),
            message: message.into(),
        }
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
