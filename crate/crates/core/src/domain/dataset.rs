use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::ids::{DatasetId, TeamId, UserId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "team", rename_all = "snake_case")]
pub enum Visibility {
    Public,
    TeamPrivate(TeamId),
}

/// Direction in which a score improves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreOrder {
    /// Lower is better (losses, MSE).
    Ascending,
    /// Higher is better (accuracy).
    Descending,
}

impl ScoreOrder {
    /// True when `a` is a strictly better score than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            ScoreOrder::Ascending => a < b,
            ScoreOrder::Descending => a > b,
        }
    }

    /// Conventional order for a metric name: error-like names ascend.
    pub fn for_metric(name: &str) -> ScoreOrder {
        let lower = name.to_ascii_lowercase();
        let ascending = ["mse", "rmse", "mae", "loss", "error", "err", "perplexity"];
        if ascending
            .iter()
            .any(|m| lower == *m || lower.ends_with(&format!("_{m}")))
        {
            ScoreOrder::Ascending
        } else {
            ScoreOrder::Descending
        }
    }
}

/// The metric a dataset's held-out evaluation reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric_name: String,
    pub order: ScoreOrder,
}

impl Evaluation {
    pub fn named(metric_name: impl Into<String>) -> Self {
        let metric_name = metric_name.into();
        let order = ScoreOrder::for_metric(&metric_name);
        Self { metric_name, order }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub dataset_id: DatasetId,
    pub owner: UserId,
    pub visibility: Visibility,
    pub size: u64,
    pub created_at: Millis,
    pub last_access: Millis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<Evaluation>,
    /// Where the content lives; never read by the simulator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl Dataset {
    pub fn visible_to(&self, user: &UserAccount) -> bool {
        match &self.visibility {
            Visibility::Public => true,
            Visibility::TeamPrivate(team) => user.teams.contains(team),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Admin,
    User,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserAccount {
    pub user_id: UserId,
    pub role: Role,
    pub credit_balance: u64,
    #[serde(default)]
    pub teams: BTreeSet<TeamId>,
}

impl UserAccount {
    pub fn new(user_id: UserId, role: Role, credit_balance: u64) -> Self {
        Self {
            user_id,
            role,
            credit_balance,
            teams: BTreeSet::new(),
        }
    }

    pub fn is_admin(&self) -> bool {
        self.role == Role::Admin
    }

    pub fn shares_team(&self, team: Option<&TeamId>) -> bool {
        team.is_some_and(|t| self.teams.contains(t))
    }
}
