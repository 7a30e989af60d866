use std::path::PathBuf;

/// Errors raised anywhere in the restoration pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor extents; the message names both shapes.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Odd spatial extent handed to an operation that halves resolution.
    #[error("parity error in {op}: shape {shape:?} has an odd spatial extent")]
    Parity { op: &'static str, shape: Vec<usize> },
    /// A precondition of an operation was violated.
    #[error("contract error: {0}")]
    Contract(String),
    /// A forward operation produced NaN or infinity from finite inputs.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    /// Invalid configuration; `key` is the dotted path of the offending field.
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed file contents (tensor container, PPM, manifest).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { key: key.into(), msg: msg.into() }
    }
}
