use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not positive semidefinite (eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate graph: node {node} has zero degree; raise the sparsity s or check the embeddings")]
    DegenerateGraph { node: usize },

    #[error("non-finite gradient in `{layer}` at step {step}")]
    NanGradient { layer: String, step: u64 },

    #[error("stale forward cache: {0}")]
    StaleCache(String),

    #[error("{skipped} of {total} batches skipped on degenerate affinity graphs (limit 1%)")]
    TooManySkipped { skipped: usize, total: usize },

    #[error("{path}: format error at {location}: {message}")]
    Format {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("{path}: empty dataset")]
    EmptyDataset { path: PathBuf },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// Process exit status for the command-line tool: 1 usage/config,
    /// 2 data or file format, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) => 1,
            Error::Format { .. } | Error::EmptyDataset { .. } | Error::Io(_) | Error::Dimension(_) | Error::EmptyBatch => 2,
            Error::NotSymmetric(_)
            | Error::NotPsd(_)
            | Error::Factorization(_)
            | Error::NonFinite(_)
            | Error::DegenerateGraph { .. }
            | Error::NanGradient { .. }
            | Error::StaleCache(_)
            | Error::TooManySkipped { .. } => 3,
        }
    }
}
