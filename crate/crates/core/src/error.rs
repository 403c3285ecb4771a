use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown variant `{0}` (expected one of B0, B1, B2, B2-Li, B3, B4, B5)")]
    UnknownVariant(String),

    #[error("autograd: {0}")]
    Autograd(String),

    #[error("bad weight file: expected magic {expected:?}, found {found:?}")]
    Format { expected: String, found: String },

    #[error("unsupported weight format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("corrupt weight data: {0}")]
    Corrupt(String),

    #[error("config parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("weight store does not match model:\n  {}", .0.join("\n  "))]
    WeightMismatch(Vec<String>),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}
