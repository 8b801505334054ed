use thiserror::Error;

use crate::io::annotations::AnnotationError;
use crate::io::archive::ArchiveError;

pub type Result<T, E = SheError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SheError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("non-finite value at component {index}")]
    NonFinite { index: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("zero-norm direction: {0}")]
    ZeroNorm(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("span [{start}, {end}] out of range for {len} tokens in `{owner}`")]
    SpanOutOfRange {
        owner: String,
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("surface of `{0}` is empty after normalization")]
    EmptySurface(String),

    #[error("surface `{0}` is not present in the caption index")]
    Unindexed(String),

    #[error("control sample needs {needed} real behaviors, only {available} available")]
    InsufficientControl { needed: usize, available: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("layer {0} not present")]
    MissingLayer(usize),

    #[error("unknown reference: {0}")]
    UnknownReference(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("inconsistent bundle: {0}")]
    InvalidBundle(String),

    #[error(transparent)]
    Archive(#[from] ArchiveError),

    #[error(transparent)]
    Annotation(#[from] AnnotationError),

    #[error("malformed detection record on line {line}: {message}")]
    DetectionFormat { line: usize, message: String },

    #[error("I/O error")]
    Io(#[from] std::io::Error),
}

impl SheError {
    /// True when the error originates from the filesystem rather than from
    /// the content of the inputs.
    pub fn is_io(&self) -> bool {
        match self {
            SheError::Io(_) => true,
            SheError::Archive(ArchiveError::Io(_)) => true,
            SheError::Annotation(e) => e.is_io(),
            _ => false,
        }
    }
}
