use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Inputs that break an API contract, e.g. a backward pass called with
    /// buffers that do not match the forward inputs.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("initialization failed: {0}")]
    Initialization(String),

    #[error("training diverged at level {level}, iteration {iteration}: {message}")]
    Diverged {
        level: u32,
        iteration: u32,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn parse(offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}
