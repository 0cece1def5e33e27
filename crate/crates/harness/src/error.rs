use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] applenet_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV output: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }

    /// Contract violations (bad config, bad arguments) as opposed to I/O.
    pub fn is_contract(&self) -> bool {
        matches!(self, HarnessError::Core(applenet_core::Error::Contract(_)) | HarnessError::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
