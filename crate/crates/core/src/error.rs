use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range. `field` names the offending knob.
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// The merged sequence does not fit the provider's window.
    #[error(
        "provider window exceeded{}: input of {len} tokens, window is {max_window}",
        iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default()
    )]
    WindowExceeded {
        iteration: Option<usize>,
        len: usize,
        max_window: usize,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    /// Internal contract violated by a caller (e.g. selecting a question token).
    #[error("logic error: {0}")]
    Logic(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            field,
            reason: reason.into(),
        }
    }

    /// True for failures that originate in the attention provider or its transport.
    pub fn is_provider_error(&self) -> bool {
        matches!(
            self,
            Error::WindowExceeded { .. } | Error::Protocol(_) | Error::UnsupportedMode(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Protocol(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Input(e.to_string())
    }
}
