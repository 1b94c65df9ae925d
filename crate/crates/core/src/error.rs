//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by tensor ops, graph passes, and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not conform (matmul dims, kernel larger than input, ...).
    #[error("dimension error: {0}")]
    Dim(String),

    /// A documented precondition was violated by the caller.
    #[error("contract error: {0}")]
    Contract(String),

    /// A structural invariant of a value was found broken.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Non-finite value produced during backward; `node` is the tape index.
    #[error("numeric error at tape node {node}: {message}")]
    Numeric { node: usize, message: String },

    /// Invalid configuration (file contents or programmatic settings).
    #[error("config error: {0}")]
    Config(String),

    /// Bad input data (labels out of range, malformed dataset files, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Batch-norm folding could not be applied; message names the node.
    #[error("fold error: {0}")]
    Fold(String),

    /// HE finalization precondition failed; message names the node.
    #[error("finalize error: {0}")]
    Finalize(String),

    /// Filesystem failure, annotated with the offending path.
    #[error("i/o error on '{path}': {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Unreadable or incompatible serialized artifact.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
