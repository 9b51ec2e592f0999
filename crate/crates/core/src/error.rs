use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the simulation, estimation, and learning stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: String, actual: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("image {height}x{width} is too small: {reason}")]
    TooSmall {
        height: usize,
        width: usize,
        reason: String,
    },

    #[error("matrix is numerically rank deficient: {0}")]
    RankDeficient(String),

    #[error("solver did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("block at ({row}, {col}) failed: {source}")]
    Block {
        row: usize,
        col: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("rate control missed target ratio {target} (best achieved {best_ratio:.3})")]
    RateControl { target: f64, best_ratio: f64 },

    #[error("calibration search range does not bracket target PSNR {target_psnr:.2} dB ({detail})")]
    Calibration { target_psnr: f64, detail: String },

    #[error("malformed stream: {0}")]
    MalformedStream(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("unknown class label {0:?}")]
    UnknownLabel(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
