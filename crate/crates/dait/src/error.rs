use std::path::{Path, PathBuf};

pub type Result<T> = std::result::Result<T, DaitError>;

#[derive(Debug, thiserror::Error)]
pub enum DaitError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("backend unavailable: {0}")]
    Backend(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error(transparent)]
    Core(#[from] dait_core::Error),
}

impl DaitError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DaitError::Io { path: path.to_path_buf(), source }
    }

    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            DaitError::Config { .. } | DaitError::Core(dait_core::Error::Config(_)) => 2,
            DaitError::Core(dait_core::Error::UnknownGroup(_)) => 2,
            _ => 1,
        }
    }
}
