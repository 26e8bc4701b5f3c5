use thiserror::Error;

use crate::domain::SessionState;
use crate::log::LogError;

/// Why an admission request was turned away.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RejectReason {
    CreditExhausted,
    Infeasible,
    PermissionDenied,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{kind} `{id}` not found")]
    NotFound { kind: &'static str, id: String },

    #[error("{kind} `{id}` already exists")]
    Duplicate { kind: &'static str, id: String },

    #[error("permission denied: {0}")]
    PermissionDenied(String),

    #[error("session `{session}` is {state:?}; cannot {action}")]
    InvalidState {
        session: String,
        state: SessionState,
        action: &'static str,
    },

    #[error("admission rejected: {0:?}")]
    Rejected(RejectReason),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("replica is not the active primary (epoch {epoch})")]
    NotPrimary { epoch: u64 },

    #[error(transparent)]
    Log(#[from] LogError),
}

impl Error {
    pub fn not_found(kind: &'static str, id: impl ToString) -> Self {
        Error::NotFound {
            kind,
            id: id.to_string(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
