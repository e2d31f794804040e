use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Corrupt(String),

    #[error(transparent)]
    Kernel(#[from] logattn_core::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for usage errors, 3 for I/O and snapshot corruption, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Usage(_) => 2,
            HarnessError::Io { .. } | HarnessError::Corrupt(_) => 3,
            HarnessError::Kernel(logattn_core::Error::CorruptSnapshot(_)) => 3,
            HarnessError::Csv(_) | HarnessError::Json(_) => 3,
            HarnessError::Kernel(_) => 1,
        }
    }
}
