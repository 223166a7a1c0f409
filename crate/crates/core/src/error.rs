use std::fmt;

use crate::embedstore::EmbeddingKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },

    #[error("line {line}: duplicate example id `{id}`")]
    DuplicateId { line: usize, id: String },

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no {kind} embedding for `{id}`")]
    MissingEmbedding { id: String, kind: EmbeddingKind },

    #[error("embedding cache corrupt: {0}")]
    CacheCorrupt(String),

    /// A single failed request. `retryable` marks transport errors, 429s and 5xx.
    #[error("endpoint request failed: {message}")]
    Request { message: String, retryable: bool },

    #[error("endpoint failed after {attempts} attempt(s): {message}")]
    Endpoint { attempts: u32, message: String },

    #[error("attribute extraction failed: no `### Attributes` section in response")]
    AttributeExtractionFailed,

    #[error("counterfactual caption for `{attribute}` is empty")]
    EmptyCaption { attribute: String },

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("no dataset attribute annotated as present for class `{0}`")]
    NoAttributes(String),

    #[error("retrieved example `{0}` is not in the corpus")]
    UnknownExample(String),

    #[error("classification prompt requires answer options")]
    MissingOptions,

    #[error("malformed request: {0}")]
    MalformedRequest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn request(message: impl fmt::Display, retryable: bool) -> Self {
        Error::Request {
            message: message.to_string(),
            retryable,
        }
    }

    pub fn invalid(message: impl fmt::Display) -> Self {
        Error::InvalidArgument(message.to_string())
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Request { retryable: true, .. })
    }
}
