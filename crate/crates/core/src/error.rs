use thiserror::Error;

pub type Result<T> = std::result::Result<T, SmpcError>;

#[derive(Debug, Error)]
pub enum SmpcError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("pair not reachable within {steps} steps")]
    NotReachable { steps: usize },

    #[error(
        "exact enumeration over 2^{kappa} dropout patterns refused (limit 2^{limit}); \
         use mc_protocol_moments instead"
    )]
    EnumerationTooLarge { kappa: usize, limit: usize },

    #[error("assembled objective is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SmpcError {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        SmpcError::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        SmpcError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
