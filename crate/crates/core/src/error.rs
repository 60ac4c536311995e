use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodagError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    /// A training path touched the label of a sample whose labels are hidden.
    #[error("label of sample {index} in domain {domain_id} is hidden")]
    HiddenLabel { domain_id: usize, index: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("state error: {0}")]
    State(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CodagError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> CodagError {
    CodagError::InvalidArgument(msg.into())
}

pub(crate) fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CodagError {
    let context = context.into();
    move |source| CodagError::Io { context, source }
}
