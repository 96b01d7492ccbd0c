use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: expected a scalar tensor, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("concat: empty list of parts")]
    EmptyConcat,
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("backward already ran on this tape; record a new tape")]
    StaleTape,
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("parameter `{0}` has no gradient; run backward before stepping")]
    MissingGrad(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for AutodiffError {
    fn from(err: std::io::Error) -> Self {
        AutodiffError::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
