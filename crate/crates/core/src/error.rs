use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or hyperparameter combination that can never work.
    #[error("configuration error: {0}")]
    Config(String),
    /// The caller broke an operation's precondition (e.g. image too small).
    #[error("precondition failed: {0}")]
    Precondition(String),
    /// NaN or infinity showed up where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid archive: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
