use thiserror::Error;

use crate::log::MissionLog;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] dgp_core::Error),
    #[error("mission diverged at t = {time:.2} s: {reason}")]
    Diverged {
        time: f64,
        reason: String,
        partial: Box<MissionLog>,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },
}

impl HarnessError {
    /// Whether the failure is the caller's fault (bad flags, config or files).
    pub fn is_user_error(&self) -> bool {
        matches!(self, HarnessError::Config(_) | HarnessError::Format { .. })
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
