use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum TuskError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected scalar output, got shape {shape:?}")]
    NonScalar { op: &'static str, shape: Vec<usize> },

    #[error("non-finite value in loss term `{term}` at step {step}")]
    NonFiniteLoss { term: &'static str, step: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("unknown parameter name `{0}`")]
    UnknownParameter(String),

    #[error("placement infeasible: {0} objects could not be placed after {1} retries")]
    PlacementInfeasible(usize, usize),

    #[error("degenerate warp: no invertible transform within {0} attempts; use smaller magnitudes")]
    DegenerateWarp(usize),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TuskError>;

impl TuskError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TuskError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        TuskError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
