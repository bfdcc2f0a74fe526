use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not conform; `axis` names the offending dimension.
    #[error("dimension mismatch in {op}: {axis} (expected {expected}, got {actual})")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        actual: usize,
    },

    /// Invalid configuration value. `field` is a dotted path into the config.
    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    /// Malformed or out-of-range data.
    #[error("data error: {0}")]
    Data(String),

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values appeared during a numeric procedure.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Corrupt or truncated binary file.
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u8),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 for configuration and data
    /// problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
