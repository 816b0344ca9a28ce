use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the identification library.
#[derive(Debug, Error)]
pub enum NarxError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: need more than {needed} samples, got {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("rank-deficient regressor matrix; dependent columns {columns:?}")]
    RankDeficient { columns: Vec<usize> },

    #[error("rank-deficient constraint matrix; offending rows {rows:?}")]
    RankDeficientConstraints { rows: Vec<usize> },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("diverged after {iterations} iterations: {message}")]
    Diverged { iterations: usize, message: String },

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("ill-posed: {0}")]
    IllPosed(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl NarxError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        NarxError::InvalidInput(msg.into())
    }

    /// Whether the failure is numerical (as opposed to bad input or I/O).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            NarxError::RankDeficient { .. }
                | NarxError::RankDeficientConstraints { .. }
                | NarxError::Singular(_)
                | NarxError::Diverged { .. }
                | NarxError::NoConvergence(_)
                | NarxError::Degenerate(_)
                | NarxError::IllPosed(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, NarxError>;
