use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CbmtError {
    #[error("invalid config: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parameter mismatch: missing {missing:?}, unexpected {unexpected:?}, reshaped {reshaped:?}")]
    ParamMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
        reshaped: Vec<String>,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("missing calibration statistics for class {class}")]
    MissingStats { class: usize },

    #[error("sample {id} has no ground-truth mask")]
    Unlabeled { id: String },

    #[error("empty {0}")]
    Empty(String),

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("malformed {what} at line {line}: {message}")]
    Parse {
        what: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CbmtError> = std::result::Result<T, E>;

impl CbmtError {
    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        CbmtError::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CbmtError::File {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
