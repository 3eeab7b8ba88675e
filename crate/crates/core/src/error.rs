use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("malformed NIfTI header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("{path} is not a 3D scalar image (dims {dims:?})")]
    NonScalarImage { path: PathBuf, dims: Vec<u16> },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("odd dimension {height}x{width}; both must be even")]
    OddDimension { height: usize, width: usize },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("case {case} has no voxel of the requested target class")]
    EmptyTarget { case: String },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input: {0}")]
    NonfiniteInput(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonfiniteLoss {
        epoch: usize,
        step: u64,
        detail: String,
    },
    #[error("no eligible slices to sample from")]
    NoEligibleSlices,
    #[error("mask is empty")]
    EmptyMask,
    #[error("case {case} has an empty liver region")]
    EmptyLiver { case: String },
    #[error("model input mismatch: {0}")]
    ModelInputMismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid count: {0}")]
    InvalidCount(usize),
    #[error("unmatched cases: {}", .0.join(", "))]
    UnmatchedCases(Vec<String>),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by bad numerics rather than bad data or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonfiniteLoss { .. } | Error::NonfiniteInput(_))
    }
}
