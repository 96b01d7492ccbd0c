use std::fmt;
use std::path::Path;

use lsa_core::ErrorKind;

/// A failed command together with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            kind: ErrorKind::Data,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::data(format!("{}: {err}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => 1,
            ErrorKind::Data => 2,
            ErrorKind::Numeric => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<lsa_core::Error> for CliError {
    fn from(err: lsa_core::Error) -> Self {
        CliError {
            kind: err.kind(),
            message: err.to_string(),
        }
    }
}

impl From<lsa_autodiff::AutodiffError> for CliError {
    fn from(err: lsa_autodiff::AutodiffError) -> Self {
        CliError::data(err.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
