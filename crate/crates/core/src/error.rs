use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ChurnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ChurnError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("customer {id}: {message}")]
    Record { id: u64, message: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("labels contain a single class; {0}")]
    SingleClass(String),

    #[error("too few examples: {0}")]
    InsufficientData(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("leakage: model `{model}` predicted customer {id} that it was trained on")]
    Leakage { model: String, id: u64 },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<ChurnError>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    TomlRead(#[from] toml::de::Error),

    #[error("config: {0}")]
    TomlWrite(#[from] toml::ser::Error),
}

impl ChurnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ChurnError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a short description of where it happened.
    pub fn context(self, context: impl Into<String>) -> Self {
        ChurnError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}
