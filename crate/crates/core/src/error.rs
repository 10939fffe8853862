use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CortisError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CortisError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value encountered: {0}")]
    Numeric(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("construction failed: {0}")]
    Construction(String),
    #[error("request out of sequence: expected index {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },
    #[error("forget-data non-retention violated: {0}")]
    C2Violation(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("undefined similarity: {0}")]
    UndefinedSimilarity(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed artifact {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CortisError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CortisError::Io {
            path: path.into(),
            source,
        }
    }
}

impl CortisError {
    /// Process exit status: 1 for invalid input, 2 for runtime failures,
    /// 3 for a failed non-retention audit.
    pub fn exit_code(&self) -> i32 {
        match self {
            CortisError::C2Violation(_) => 3,
            CortisError::Dimension(_)
            | CortisError::Precondition(_)
            | CortisError::Sequencing { .. }
            | CortisError::Config(_)
            | CortisError::Format { .. } => 1,
            CortisError::Numeric(_)
            | CortisError::Construction(_)
            | CortisError::Calibration(_)
            | CortisError::UndefinedSimilarity(_)
            | CortisError::Io { .. } => 2,
        }
    }
}
