//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("label value {value} out of range for {num_classes} classes")]
    LabelOutOfRange { value: u32, num_classes: usize },

    #[error("step ordering error: t={t} must be greater than t_prev={t_prev}")]
    StepOrdering { t: usize, t_prev: i64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown region label: {0}")]
    UnknownRegion(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("decode error in {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {report}")]
    NonFiniteLoss { step: usize, report: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable process exit code per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Decode { .. } | Error::Checkpoint(_) => 3,
            Error::Shape(_) | Error::LabelOutOfRange { .. } | Error::StepOrdering { .. } => 4,
            Error::Empty(_) | Error::UnknownRegion(_) => 5,
            Error::NonFiniteLoss { .. } => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
