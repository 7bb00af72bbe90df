use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the requested operation.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A caller broke an operation's precondition (non-scalar loss, mask out of range, ...).
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// Malformed or unsupported file contents; `field` names the offending field.
    #[error("format error in {path}: {field}: {detail}")]
    Format { path: PathBuf, field: String, detail: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training error in parameter `{param}`: {detail}")]
    Training { param: String, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy { kind: &'static str, name: String, available: String },

    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Coarse failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
    Io,
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), field: field.into(), detail: detail.into() }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::UnknownStrategy { .. } | Error::Checkpoint(_) => ErrorClass::Config,
            Error::Input(_) | Error::Format { .. } => ErrorClass::Data,
            Error::Dimension { .. }
            | Error::Contract(_)
            | Error::Numerical(_)
            | Error::Training { .. } => ErrorClass::Numerical,
            Error::Io { .. } => ErrorClass::Io,
        }
    }
}
