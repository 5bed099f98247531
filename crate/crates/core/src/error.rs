use thiserror::Error;

pub type Result<T, E = NatmoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NatmoError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("trace parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NatmoError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        NatmoError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        NatmoError::InvalidArgument(msg.into())
    }
}
