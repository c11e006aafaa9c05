use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A modelling assumption does not hold for the given inputs.
    #[error("assumption violated ({assumption}): {detail}")]
    AssumptionViolation {
        assumption: &'static str,
        detail: String,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Assumption name attached to rank-deficiency failures.
pub const NTK_POSITIVE_DEFINITE: &str = "neural tangent kernel is positive definite";

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
