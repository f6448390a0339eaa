use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CfcbmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CfcbmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt data: {0}")]
    CorruptData(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("arity error: {0}")]
    Arity(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CfcbmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CfcbmError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Self {
        CfcbmError::Dimension(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
    }
}
