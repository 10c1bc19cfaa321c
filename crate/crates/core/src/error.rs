use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate post_id {post_id:?} for user {user_id:?}")]
    DuplicatePost { user_id: String, post_id: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown template set {0:?} (expected depress, bdi2, full, hdrs, cesd, phq9 or a '+'-joined combination)")]
    UnknownPreset(String),

    #[error("template bank integrity check failed: {0}")]
    Integrity(String),

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    /// Transport-level failure talking to a remote encoder; safe to retry.
    #[error("embedding service unavailable: {0}")]
    ProviderUnavailable(String),

    /// The remote encoder answered, but not with something usable.
    #[error("malformed embedding response: {0}")]
    MalformedResponse(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("user {user_id:?}, post {post_index}: {source}")]
    Stream {
        user_id: String,
        post_index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing label for user {0:?}")]
    MissingLabel(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_retriable(&self) -> bool {
        matches!(self, Error::ProviderUnavailable(_))
    }
}
