use std::path::PathBuf;

/// Errors raised across the crate.
#[derive(Debug, thiserror::Error)]
pub enum LaknError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LaknError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LaknError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable kind, used in CLI error documents.
    pub fn kind(&self) -> &'static str {
        match self {
            LaknError::Dimension(_) => "dimension",
            LaknError::Index(_) => "index",
            LaknError::Contract(_) => "contract",
            LaknError::Capacity(_) => "capacity",
            LaknError::Parse { .. } => "parse",
            LaknError::Integrity(_) => "integrity",
            LaknError::Training { .. } => "training",
            LaknError::Config { .. } => "config",
            LaknError::Checkpoint(_) => "checkpoint",
            LaknError::Io { .. } => "io",
            LaknError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, LaknError>;
