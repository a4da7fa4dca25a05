use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the relighting pipeline.
///
/// Variants are grouped by [`ErrorKind`] so front ends can map them to a
/// stable exit status or HTTP code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated input at byte offset {offset}: {what}")]
    Truncated { offset: usize, what: String },
    #[error("unsupported format: {0}")]
    Unsupported(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("insufficient tracking frames: need at least 2, got {0}")]
    InsufficientTracking(usize),
    #[error("light {label}: {source}")]
    Light {
        label: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Numeric,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn for_light(label: &str, source: Error) -> Self {
        Error::Light {
            label: label.to_string(),
            source: Box::new(source),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::Numeric(_) => ErrorKind::Numeric,
            Error::Light { source, .. } => source.kind(),
            _ => ErrorKind::Validation,
        }
    }
}
