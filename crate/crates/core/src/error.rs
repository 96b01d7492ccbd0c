use std::path::PathBuf;

use lsa_autodiff::AutodiffError;

/// Coarse failure class, used by callers to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation at line {line}, column {column}: {message}")]
    Schema {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("example {example}: {message}")]
    InvalidExample { example: usize, message: String },
    #[error("example {example}, aspect {aspect}: span text {found:?} does not match term {expected:?}")]
    SpanMismatch {
        example: usize,
        aspect: usize,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("xml: {0}")]
    Xml(String),
    #[error("conllu line {line}: {message}")]
    Conllu { line: usize, message: String },
    #[error("invalid dependency tree: {0}")]
    Tree(String),
    #[error("token {token} is not covered by the alignment")]
    Alignment { token: usize },
    #[error("aspect has no tokens")]
    EmptyAspect,
    #[error("{what} index {index} out of range for length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("sequence of length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("inconsistent synthetic spec: {0}")]
    Synth(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint does not match config: {0}")]
    Incompatible(String),
    #[error("slice `{0}` selects no aspects")]
    EmptySlice(String),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::NonFinite { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
