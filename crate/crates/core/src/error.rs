use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Cholesky factorization failed even after jitter escalation.
    #[error("singular model: {context} not positive definite (last jitter {jitter:e})")]
    Singular { context: &'static str, jitter: f64 },

    #[error("degenerate pseudo inputs: {0}")]
    DegeneratePseudoInputs(String),

    #[error("ill-conditioned recursive update: G = {0:e}")]
    Conditioning(f64),

    #[error("gimbal singularity: pitch {pitch} rad, roll {roll} rad")]
    GimbalSingularity { roll: f64, pitch: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("snapshot error: {0}")]
    Snapshot(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
