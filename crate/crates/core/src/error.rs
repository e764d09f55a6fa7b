use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("rate mismatch: frames at {fps} Hz, signal at {rate} Hz")]
    RateMismatch { fps: f64, rate: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),
    #[error("value {value} outside [0, 1]")]
    BadRange { value: f64 },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("invalid synthetic task spec: {0}")]
    BadSpec(String),
    #[error("invalid split: {0}")]
    BadSplit(String),
    #[error("invalid rate: {0}")]
    BadRate(f64),
    #[error("invalid layer index {index} (encoder has {available} blocks)")]
    BadLayer { index: usize, available: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("labels required but absent")]
    MissingLabels,
    #[error("stream too short: {len} frames, need more than {needed}")]
    StreamTooShort { len: usize, needed: usize },
    #[error("too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("too few peaks: {0} (need at least 2)")]
    TooFewPeaks(usize),
    #[error("degenerate variance: {0}")]
    DegenerateVariance(&'static str),
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("decode error: {0}")]
    DecodeError(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for failures caused by bad numbers rather than bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::NonFiniteGradient(_) | Error::DegenerateVariance(_)
        )
    }
}
