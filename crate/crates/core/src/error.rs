//! Crate-wide error type. Every public operation that can fail returns
//! [`Result`]; the variant names mirror the failure categories the CLI
//! reports (`Error::category`).

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid statistics: {0}")]
    InvalidStatistics(String),

    #[error("invalid label {label}: class count is {classes}")]
    InvalidLabel { label: u8, classes: usize },

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),

    #[error("invalid k {k}: training set has {n_train} rows")]
    InvalidK { k: usize, n_train: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported weights version {0}")]
    UnsupportedVersion(u32),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("manifest error at `{key}`: {message}")]
    Manifest { key: String, message: String },

    #[error("missing input artifact: {0}")]
    MissingInput(PathBuf),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable kebab-case category used in CLI error messages and exit-code
    /// mapping.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidShape(_) => "invalid-shape",
            Error::InvalidStatistics(_) => "invalid-statistics",
            Error::InvalidLabel { .. } => "invalid-label",
            Error::InvalidBatch(_) => "invalid-batch",
            Error::ContractViolation(_) => "contract-violation",
            Error::NonFinite { .. } => "non-finite",
            Error::InvalidDataset(_) => "invalid-dataset",
            Error::InvalidDescriptor(_) => "invalid-descriptor",
            Error::InvalidK { .. } => "invalid-k",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::Parse { .. } => "parse",
            Error::UnsupportedFormat(_) => "unsupported-format",
            Error::Format(_) => "format",
            Error::UnsupportedVersion(_) => "unsupported-version",
            Error::Integrity(_) => "integrity",
            Error::Manifest { .. } => "manifest",
            Error::MissingInput(_) => "missing-input",
            Error::Io(_) => "io",
        }
    }
}
