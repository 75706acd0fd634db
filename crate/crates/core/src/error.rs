use thiserror::Error;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate item_id {0:?}")]
    DuplicateItem(String),

    #[error("dataset contains no items")]
    EmptyDataset,

    #[error("malformed trace at byte {offset} (line {line}): {message}")]
    TraceFormat {
        offset: usize,
        line: usize,
        message: String,
    },

    #[error("invalid trace for item {item_id:?}: {reason}")]
    InvalidTrace { item_id: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("toy model: {0}")]
    Toy(String),

    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("no items to evaluate")]
    NoItems,

    #[error("refusing to overwrite {0} (pass --force)")]
    WouldOverwrite(String),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for this error when it terminates a run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Backend(e) if e.is_fatal() => 2,
            Error::Backend(_) => 2,
            Error::DegenerateLabels(_) | Error::NoItems => 4,
            _ => 1,
        }
    }
}
