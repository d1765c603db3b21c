use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("spectrum has zero total count")]
    ZeroSpectrum,

    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format violation: {0}")]
    FormatViolation(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("degenerate configuration: {0}")]
    DegenerateConfig(String),

    #[error("unsupported filter size {0} (only 3 is supported)")]
    UnsupportedFilterSize(usize),

    #[error("input {height}x{width} is too small for a {window}-pixel window")]
    TooSmallForScales { height: usize, width: usize, window: usize },

    #[error("need at least {needed} samples along the axis, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("value {value} outside range [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("non-square {height}x{width} input cannot be rotated")]
    NonSquareInput { height: usize, width: usize },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    DivergenceDetected { epoch: usize, loss: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
