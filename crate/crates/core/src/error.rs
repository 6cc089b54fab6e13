use std::path::PathBuf;

/// Errors produced by the fusion library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value {value} at row {row}, column {col}")]
    NonFinite { row: usize, col: usize, value: f64 },

    #[error("empty feature matrix ({rows}x{cols})")]
    Empty { rows: usize, cols: usize },

    #[error("invalid stride {0} ms")]
    InvalidStride(f64),

    #[error("insufficient frames for variance: need at least 2, got {0}")]
    InsufficientFrames(usize),

    #[error("incompatible strides: {from} ms -> {to} ms is not an integer ratio")]
    IncompatibleStrides { from: f64, to: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate gate: alpha + beta = {0}")]
    DegenerateGate(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("negative loss input: {name} = {value}")]
    NegativeLoss { name: &'static str, value: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("training diverged at step {step}: total loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("unrecognized format: {0}")]
    UnrecognizedFormat(PathBuf),

    #[error("corrupt file {path}: expected {expected} bytes, got {actual}")]
    CorruptFile {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("non-finite value at flat index {index} in {path}")]
    NonFiniteInFile { path: PathBuf, index: usize },

    #[error("manifest parse error on line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("parameter file: {0}")]
    Params(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
