use std::path::PathBuf;

use crate::checkpoint::Checkpoint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("{op}: degenerate dimension ({detail})")]
    Degenerate { op: &'static str, detail: String },

    #[error("{op}: cannot pool over an empty token set")]
    EmptyPool { op: &'static str },

    #[error("{context}: zero-norm vector at index {index}, similarity undefined")]
    ZeroNorm { context: String, index: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("image geometry: {0}")]
    Geometry(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{stage}: loss diverged (non-finite) at epoch {epoch}")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        /// Parameters as of the last epoch that finished with a finite loss.
        last_good: Option<Box<Checkpoint>>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
