use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },

    #[error("variable belongs to a different tape")]
    ForeignVar,

    #[error("layer {layer}: input {height}x{width} is smaller than the {kernel}x{kernel} kernel")]
    InputTooSmall { layer: String, height: usize, width: usize, kernel: usize },

    #[error("layer {layer}: train-mode batch normalization needs at least 2 samples, got {batch}")]
    BatchTooSmall { layer: String, batch: usize },

    #[error("function is not deterministic: two evaluations at the same point differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),

    #[error("parameter {0} has no gradient")]
    MissingGradient(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("probability vector is not normalized (sum = {0})")]
    Unnormalized(f64),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: corr={corr}, concat={concat}")]
    Divergence { epoch: usize, batch: usize, corr: f64, concat: f64 },

    #[error("query point ({x}, {y}) in {sequence}#{frame}: widened patch leaves the image")]
    QueryOutOfBounds { sequence: String, frame: u32, x: i32, y: i32 },

    #[error("fold {fold}: sequence {sequence} appears in both training and test splits")]
    FoldOverlap { fold: String, sequence: String },

    #[error("unknown sequence {0}")]
    UnknownSequence(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("{path}: {msg}")]
    Data { path: PathBuf, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures that indicate numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::NonFinite { .. } | Error::NonDeterministic { .. })
    }
}
