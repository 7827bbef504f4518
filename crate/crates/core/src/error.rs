use std::path::PathBuf;

use sedan_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite values or a solve that cannot be repaired.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("rank-deficient design matrix: {0}")]
    RankDeficient(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{}{}: {message}", path.display(), row.map(|r| format!(" row {r}")).unwrap_or_default())]
    Format { path: PathBuf, row: Option<usize>, message: String },

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy { kind: &'static str, name: String, available: String },

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::RankDeficient(_))
    }

    pub(crate) fn format(path: impl Into<PathBuf>, row: Option<usize>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), row, message: message.into() }
    }
}
