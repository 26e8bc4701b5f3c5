//! String newtypes for the identifiers that cross module and wire boundaries.

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(value: impl Into<String>) -> Self {
                Self(value.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(value: &str) -> Self {
                Self(value.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(value: String) -> Self {
                Self(value)
            }
        }

        impl std::borrow::Borrow<str> for $name {
            fn borrow(&self) -> &str {
                &self.0
            }
        }
    };
}

string_id!(NodeId);
string_id!(UserId);
string_id!(TeamId);
string_id!(DatasetId);
string_id!(ImageId);
string_id!(CheckpointId);
string_id!(SubmissionId);
string_id!(SweepId);
string_id!(
    /// `{user}/{dataset}/{seq}`, where `seq` is monotone per (user, dataset).
    SessionId
);

impl SessionId {
    pub fn compose(user: &UserId, dataset: &DatasetId, seq: u64) -> Self {
        Self(format!("{user}/{dataset}/{seq}"))
    }

    /// Splits a session id back into its owner, dataset and sequence parts.
    ///
    /// Dataset ids may themselves contain `/`, so the owner is taken up to the
    /// first separator and the sequence after the last one.
    pub fn parts(&self) -> Option<(&str, &str, u64)> {
        let (user, rest) = self.0.split_once('/')?;
        let (dataset, seq) = rest.rsplit_once('/')?;
        if user.is_empty() || dataset.is_empty() {
            return None;
        }
        Some((user, dataset, seq.parse().ok()?))
    }
}
