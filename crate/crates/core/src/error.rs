use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by every stage of the registration pipeline.
///
/// The `Display` form always starts with the error kind so that command line
/// diagnostics can be matched on a stable prefix.
#[derive(Debug, Error)]
pub enum Error {
    #[error("IOError: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("FormatError: {0}")]
    Format(String),
    #[error("EmptyCloud: {0}")]
    EmptyCloud(String),
    #[error("TooFewPoints: need at least {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("QuotaExceedsPoints: quota {quota} > {available} points")]
    QuotaExceedsPoints { quota: usize, available: usize },
    #[error("DegenerateCloud: {0}")]
    DegenerateCloud(String),
    #[error("DegenerateInput: {0}")]
    DegenerateInput(String),
    #[error("DegenerateFrame: {0}")]
    DegenerateFrame(String),
    #[error("SizeMismatch: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("BadFraction: {0} is outside (0, 0.5)")]
    BadFraction(f64),
    #[error("InvalidParams: {0}")]
    InvalidParams(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short kind name, e.g. `"IOError"`.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "IOError",
            Error::Format(_) => "FormatError",
            Error::EmptyCloud(_) => "EmptyCloud",
            Error::TooFewPoints { .. } => "TooFewPoints",
            Error::QuotaExceedsPoints { .. } => "QuotaExceedsPoints",
            Error::DegenerateCloud(_) => "DegenerateCloud",
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::DegenerateFrame(_) => "DegenerateFrame",
            Error::SizeMismatch { .. } => "SizeMismatch",
            Error::BadFraction(_) => "BadFraction",
            Error::InvalidParams(_) => "InvalidParams",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
