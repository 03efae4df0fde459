use thiserror::Error;

/// Errors raised across the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("state error: {0}")]
    State(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("training error at {location}: {message}")]
    Training { location: String, message: String },

    #[error("rollout diverged at step {step}: {message}")]
    Rollout { step: usize, message: String },

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
