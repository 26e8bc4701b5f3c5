//! Datasets, users, teams, visibility and credit accounting.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::control::ControlPlane;
use crate::domain::{Dataset, Evaluation, Role, SessionState, UserAccount, Visibility};
use crate::error::{Error, Result};
use crate::event::Event;
use crate::ids::{DatasetId, SessionId, TeamId, UserId};

/// Credits charged per `per_gpu_seconds` GPU-seconds of usage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditRate {
    pub credits: u64,
    pub per_gpu_seconds: u64,
}

impl Default for CreditRate {
    /// One credit per GPU-minute.
    fn default() -> Self {
        Self {
            credits: 1,
            per_gpu_seconds: 60,
        }
    }
}

impl CreditRate {
    pub fn free() -> Self {
        Self {
            credits: 0,
            per_gpu_seconds: 1,
        }
    }

    /// Cost of `gpu_ms` GPU-milliseconds, rounded up to a whole credit.
    pub fn cost(&self, gpu_ms: u64) -> u64 {
        let num = gpu_ms as u128 * self.credits as u128;
        let den = self.per_gpu_seconds.max(1) as u128 * 1000;
        num.div_ceil(den) as u64
    }
}

/// Result of metering a user's usage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChargeOutcome {
    pub balance: u64,
    pub charged: u64,
    /// Present when the balance hit zero while sessions were running.
    pub exhausted: Option<Exhaustion>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exhaustion {
    pub user_id: UserId,
    pub running: Vec<SessionId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum UserAction {
    Create {
        user_id: UserId,
        #[serde(default = "default_role")]
        role: Role,
        #[serde(default)]
        credit: u64,
        #[serde(default)]
        teams: BTreeSet<TeamId>,
    },
    SetCredit {
        user_id: UserId,
        credit: u64,
    },
    SetRole {
        user_id: UserId,
        role: Role,
    },
    SetTeam {
        user_id: UserId,
        team: TeamId,
        #[serde(default = "yes")]
        member: bool,
    },
}

fn default_role() -> Role {
    Role::User
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetPush {
    pub dataset_id: DatasetId,
    pub size: u64,
    #[serde(default = "public")]
    pub visibility: Visibility,
    #[serde(default)]
    pub evaluation: Option<Evaluation>,
    #[serde(default)]
    pub path: Option<String>,
}

fn public() -> Visibility {
    Visibility::Public
}

impl ControlPlane {
    /// Bootstrap path for seeding accounts from configuration; no admin check.
    pub fn ensure_user(&mut self, account: UserAccount) -> Result<UserAccount> {
        if let Some(existing) = self.state.users.get(&account.user_id) {
            return Ok(existing.clone());
        }
        self.emit(Event::UserCreated {
            account: account.clone(),
        })?;
        Ok(account)
    }

    pub fn manage_user(&mut self, admin: &UserId, action: UserAction) -> Result<UserAccount> {
        let caller = self.state.user(admin)?;
        if !caller.is_admin() {
            return Err(Error::PermissionDenied(format!(
                "{admin} is not an administrator"
            )));
        }
        let target = match action {
            UserAction::Create {
                user_id,
                role,
                credit,
                teams,
            } => {
                let mut account = UserAccount::new(user_id.clone(), role, credit);
                account.teams = teams;
                self.emit(Event::UserCreated { account })?;
                user_id
            }
            UserAction::SetCredit { user_id, credit } => {
                self.state.user(&user_id)?;
                self.emit(Event::CreditSet {
                    user_id: user_id.clone(),
                    balance: credit,
                })?;
                user_id
            }
            UserAction::SetRole { user_id, role } => {
                self.state.user(&user_id)?;
                self.emit(Event::RoleSet {
                    user_id: user_id.clone(),
                    role,
                })?;
                user_id
            }
            UserAction::SetTeam {
                user_id,
                team,
                member,
            } => {
                self.state.user(&user_id)?;
                let event = if member {
                    Event::TeamJoined {
                        user_id: user_id.clone(),
                        team,
                    }
                } else {
                    Event::TeamLeft {
                        user_id: user_id.clone(),
                        team,
                    }
                };
                self.emit(event)?;
                user_id
            }
        };
        Ok(self.state.user(&target)?.clone())
    }

    pub fn push_dataset(&mut self, owner: &UserId, push: DatasetPush) -> Result<Dataset> {
        let account = self.state.user(owner)?;
        if push.size == 0 {
            return Err(Error::invalid("dataset size must be positive"));
        }
        if push.dataset_id.as_str().is_empty() || push.dataset_id.as_str().contains('/') {
            return Err(Error::invalid(
                "dataset id must be non-empty and contain no `/`",
            ));
        }
        if self.state.datasets.contains_key(&push.dataset_id) {
            return Err(Error::Duplicate {
                kind: "dataset",
                id: push.dataset_id.to_string(),
            });
        }
        if let Visibility::TeamPrivate(team) = &push.visibility {
            if !account.teams.contains(team) {
                return Err(Error::PermissionDenied(format!(
                    "{owner} is not a member of team {team}"
                )));
            }
        }
        let now = self.now();
        let dataset = Dataset {
            dataset_id: push.dataset_id,
            owner: owner.clone(),
            visibility: push.visibility,
            size: push.size,
            created_at: now,
            last_access: now,
            evaluation: push.evaluation,
            path: push.path,
        };
        self.emit(Event::DatasetPushed {
            dataset: dataset.clone(),
        })?;
        Ok(dataset)
    }

    /// Datasets the requester may see, in id order.
    pub fn list_datasets(&self, requester: &UserId) -> Result<Vec<Dataset>> {
        let user = self.state.user(requester)?;
        Ok(self
            .state
            .datasets
            .values()
            .filter(|d| d.visible_to(user))
            .cloned()
            .collect())
    }

    /// A dataset, or `PermissionDenied` whether it is missing or merely hidden.
    pub fn visible_dataset(&self, requester: &UserId, id: &DatasetId) -> Result<&Dataset> {
        let user = self.state.user(requester)?;
        self.state
            .datasets
            .get(id)
            .filter(|d| d.visible_to(user))
            .ok_or_else(|| {
                Error::PermissionDenied(format!("dataset {id} is not visible to {requester}"))
            })
    }

    /// Meters `gpu_ms` of usage against `user` at the configured rate.
    ///
    /// Rounding is applied to the cumulative total, so charging in many small
    /// increments costs the same as one lump charge.
    pub fn charge_credit(&mut self, user: &UserId, gpu_ms: u64) -> Result<ChargeOutcome> {
        self.state.user(user)?;
        let meter = self.state.meters.get(user).cloned().unwrap_or_default();
        let owed = self.config.credit_rate.cost(meter.gpu_ms + gpu_ms);
        let credits = owed.saturating_sub(meter.charged);
        if gpu_ms > 0 || credits > 0 {
            self.emit(Event::CreditCharged {
                user_id: user.clone(),
                gpu_ms,
                credits,
            })?;
        }
        let balance = self.state.user(user)?.credit_balance;
        let running: Vec<SessionId> = self
            .state
            .sessions
            .values()
            .filter(|s| {
                &s.owner == user
                    && matches!(s.state, SessionState::Running | SessionState::Preparing)
            })
            .map(|s| s.session_id.clone())
            .collect();
        let exhausted = (balance == 0 && !running.is_empty()).then(|| Exhaustion {
            user_id: user.clone(),
            running,
        });
        Ok(ChargeOutcome {
            balance,
            charged: credits,
            exhausted,
        })
    }
}
