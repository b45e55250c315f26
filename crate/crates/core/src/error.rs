use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient statistics: {0}")]
    InsufficientStatistics(String),

    #[error("non-text token {0}")]
    NonTextToken(u32),

    #[error("non-location token {0}")]
    NonLocationToken(u32),

    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("input length {0} exceeds 512")]
    InputTooLong(usize),

    #[error("missing field `{0}`")]
    MissingField(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("vocab format: {0}")]
    VocabFormat(String),

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
