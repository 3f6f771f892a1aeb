use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest record {index}: {message}")]
    Record { index: usize, message: String },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("upsampling from {from_hz} Hz to {to_hz} Hz is not supported")]
    UnsupportedUpsampling { from_hz: f64, to_hz: f64 },

    #[error("degenerate signal for subject {subject}: {message}")]
    DegenerateSignal { subject: String, message: String },

    #[error("signal too short: need {needed} samples, have {actual}")]
    SignalTooShort { needed: usize, actual: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numerical singularity: {0}")]
    Singular(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("task mismatch: {0}")]
    Task(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parsable class name, used by the command-line front end.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Record { .. } | Error::Manifest(_) => "manifest",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::UnsupportedUpsampling { .. } => "unsupported-upsampling",
            Error::DegenerateSignal { .. } => "degenerate-signal",
            Error::SignalTooShort { .. } => "signal-too-short",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Singular(_) => "numerical-singularity",
            Error::NonFinite(_) => "non-finite",
            Error::Shape(_) => "shape",
            Error::Checkpoint(_) => "checkpoint",
            Error::Task(_) => "task-mismatch",
            Error::Json(_) => "json",
        }
    }
}
