use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("division by zero in element {index}")]
    DivisionByZero { index: usize },

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: i64, classes: usize },

    #[error("invalid graph state: {0}")]
    State(String),

    #[error("association index {index} out of bounds for {len} pixels")]
    Association { index: i64, len: usize },

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("tracking lost: {valid} valid correspondences (need {required})")]
    TrackingLost { valid: usize, required: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("training diverged at iteration {iteration}: loss is {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

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
