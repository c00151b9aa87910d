use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed dataset files. `line` is 1-based when present.
    #[error("{file}{}: {msg}", line.map(|l| format!(":{l}")).unwrap_or_default())]
    Data {
        file: String,
        line: Option<usize>,
        msg: String,
    },

    #[error("utterance {index} has {len} tokens, at most {max} fit")]
    TooLong { index: usize, len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config: {0}")]
    Config(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("function under gradient check is not deterministic")]
    NonDeterministic,
}

impl Error {
    /// Stable identifier used as the prefix of CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::Data { .. } => "E_DATA",
            Error::TooLong { .. } => "E_TOO_LONG",
            Error::Shape(_) => "E_SHAPE",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::InvalidArgument(_) => "E_ARG",
            Error::Config(_) => "E_CONFIG",
            Error::Corrupt(_) => "E_CORRUPT",
            Error::DimensionMismatch(_) => "E_DIM",
            Error::NonDeterministic => "E_NONDET",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
