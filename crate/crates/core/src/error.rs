use thiserror::Error;

/// Errors surfaced by the engine, samplers, and diagnostics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A caller broke an internal contract, e.g. adapting after freeze.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// Target-spec grammar error with the byte offset of the offending token.
    #[error("parse error at byte {position}: {message}")]
    Parse { position: usize, message: String },

    /// The model could not be evaluated at a chain's starting point.
    #[error("model evaluation failed at initial point {position:?}: {message}")]
    BadInitialPoint { position: Vec<f64>, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
