use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum MhdError {
    /// A configuration value is invalid. `key` is the dotted path of the offending field.
    #[error("invalid configuration at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("training diverged for client {client} at step {step}: {detail}")]
    Divergence { client: usize, step: usize, detail: String },

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MhdError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        MhdError::Config { key: key.into(), message: message.into() }
    }
}

pub type Result<T, E = MhdError> = std::result::Result<T, E>;
