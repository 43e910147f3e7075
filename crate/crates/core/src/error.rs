use thiserror::Error;

#[derive(Error, Debug)]
pub enum MlipError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MlipError>;

pub(crate) fn invalid(msg: impl Into<String>) -> MlipError {
    MlipError::InvalidInput(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> MlipError {
    MlipError::Shape(msg.into())
}
