use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Transport-level failure while paging through the evidence API. The
    /// cursor is the `after` value of the page that failed, so a caller can
    /// resume from there.
    #[error("network error fetching page after cursor {cursor:?}: {message}")]
    Network {
        cursor: Option<String>,
        message: String,
    },

    #[error("malformed response: field `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("sequence of length {len} exceeds context width {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },

    #[error("no masked positions in batch")]
    NoMaskedPositions,

    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64, trace: Vec<f64> },

    #[error("class {0} has too few examples")]
    InsufficientExamples(char),

    #[error("prompt of {tokens} tokens exceeds budget of {budget}")]
    PromptTooLong { tokens: usize, budget: usize },

    #[error("llm client error: {0}")]
    Llm(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for failures worth retrying (transport, upstream service).
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Network { .. } | Error::Llm(_))
    }
}
