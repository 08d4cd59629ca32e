use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    Dimension { expected: usize, actual: usize, context: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("finite-difference oracle failed at index {index}: {reason}")]
    Oracle { index: usize, reason: String },

    #[error("point is not smooth: pre-activation {value:e} within {threshold:e} of the ReLU kink")]
    NonSmooth { value: f64, threshold: f64 },

    #[error("out of regime: non-positive variance denominator at indices {indices:?}")]
    OutOfRegime { indices: Vec<usize> },

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: usize, loss: f64 },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("config error: {key}{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config { key: String, line: Option<usize>, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(key: impl Into<String>, line: Option<usize>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), line, message: message.into() }
    }
}
