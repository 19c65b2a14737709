use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the deconvolution toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("kernel of size {kernel} does not fit in a {rows}x{cols} image")]
    KernelTooLarge {
        kernel: usize,
        rows: usize,
        cols: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("image dimension {0} too small (need at least 2 pixels per axis)")]
    DegenerateDimension(usize),

    #[error("dense assembly refused: {pixels} pixels exceeds the limit of {limit}")]
    TooLargeForDense { pixels: usize, limit: usize },

    #[error("singular 4x4 block at frequency ({row}, {col})")]
    SingularBlock { row: usize, col: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("empty kernel: {0}")]
    EmptyKernel(String),

    #[error("degenerate normalization system (numerical rank 0)")]
    DegenerateSystem,

    #[error("color input required: {0}")]
    ColorRequired(String),

    #[error("failed to read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },

    #[error("failed to write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },

    #[error("malformed kernel file: {0}")]
    KernelFormat(String),
}

pub type Result<T> = std::result::Result<T, Error>;
