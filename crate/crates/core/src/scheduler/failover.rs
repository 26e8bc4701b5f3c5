//! Primary/secondary warm standby: heartbeats carrying the replication
//! watermark, epoch fencing, promotion on timeout and demotion on a higher epoch.

use serde::{Deserialize, Serialize};

use crate::clock::{Millis, SECOND};
use crate::control::ControlPlane;
use crate::error::{Error, Result};
use crate::event::Event;
use crate::log::{EventLog, LogRecord};
use crate::state::ControlState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Primary,
    Secondary,
}

/// Wire heartbeat. Every field is required.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeartbeatMessage {
    pub epoch: u64,
    pub role: Role,
    pub max_seq: u64,
    pub ts: Millis,
}

impl HeartbeatMessage {
    pub fn parse(raw: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum HeartbeatAck {
    /// Accepted; `max_seq` is the receiver's log watermark after applying.
    Ok {
        epoch: u64,
        max_seq: u64,
        /// Records the receiver still lacks, if the sender is ahead.
        #[serde(default)]
        pull: Option<(u64, u64)>,
    },
    /// The sender is behind; it must step down and adopt `current_epoch`.
    StaleEpoch { current_epoch: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailoverConfig {
    pub heartbeat_interval: Millis,
    pub failover_timeout: Millis,
}

impl Default for FailoverConfig {
    fn default() -> Self {
        Self {
            heartbeat_interval: SECOND,
            failover_timeout: 3 * SECOND,
        }
    }
}

impl FailoverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heartbeat_interval == 0 {
            return Err(Error::invalid("heartbeat_interval must be positive"));
        }
        if self.failover_timeout <= 2 * self.heartbeat_interval {
            return Err(Error::invalid(
                "failover_timeout must exceed twice the heartbeat interval",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromotionEvent {
    pub replica: String,
    pub epoch: u64,
    pub at: Millis,
    /// Last replicated sequence the new primary starts from.
    pub max_seq: u64,
}

/// One scheduler replica: a control plane plus its role in the pair.
#[derive(Debug)]
pub struct Replica {
    pub plane: ControlPlane,
    role: Role,
    config: FailoverConfig,
    /// Highest epoch this replica has seen, including while resyncing.
    epoch: u64,
    last_peer_heartbeat: Millis,
    /// Highest sequence the peer has acknowledged.
    peer_acked: u64,
}

impl Replica {
    pub fn new(plane: ControlPlane, role: Role, config: FailoverConfig) -> Self {
        let now = plane.now();
        let epoch = plane.epoch();
        Self {
            plane,
            role,
            config,
            epoch,
            last_peer_heartbeat: now,
            peer_acked: 0,
        }
    }

    /// Starts the first epoch on a fresh primary.
    pub fn bootstrap(&mut self) -> Result<u64> {
        if self.role != Role::Primary {
            return Err(Error::NotPrimary { epoch: self.epoch });
        }
        let epoch = self.plane.epoch() + 1;
        self.plane.emit(Event::EpochStarted {
            epoch,
            replica: self.plane.replica().to_owned(),
        })?;
        self.epoch = epoch;
        Ok(epoch)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn config(&self) -> &FailoverConfig {
        &self.config
    }

    pub fn is_primary(&self) -> bool {
        self.role == Role::Primary
    }

    pub fn peer_acked(&self) -> u64 {
        self.peer_acked
    }

    pub fn last_peer_heartbeat(&self) -> Millis {
        self.last_peer_heartbeat
    }

    pub fn heartbeat(&self, now: Millis) -> HeartbeatMessage {
        HeartbeatMessage {
            epoch: self.epoch,
            role: self.role,
            max_seq: self.plane.log().max_seq(),
            ts: now,
        }
    }

    /// Records the peer has not yet acknowledged, for piggybacking.
    pub fn unacked_records(&self) -> Vec<LogRecord> {
        self.plane
            .log()
            .range(self.peer_acked + 1, self.plane.log().max_seq())
    }

    /// Handles a peer heartbeat and any records shipped with it.
    pub fn record_heartbeat(
        &mut self,
        msg: &HeartbeatMessage,
        records: &[LogRecord],
        now: Millis,
    ) -> Result<HeartbeatAck> {
        if msg.epoch < self.epoch {
            return Ok(HeartbeatAck::StaleEpoch {
                current_epoch: self.epoch,
            });
        }
        if msg.epoch > self.epoch {
            self.observe_epoch(msg.epoch)?;
        }
        self.last_peer_heartbeat = self.last_peer_heartbeat.max(now);
        match (self.role, msg.role) {
            (Role::Primary, Role::Secondary) => {
                self.peer_acked = msg.max_seq.min(self.plane.log().max_seq());
            }
            (Role::Secondary, Role::Primary) => {
                self.replicate(records)?;
            }
            (Role::Primary, Role::Primary) => {
                return Err(Error::Invariant(format!(
                    "two primaries in epoch {}",
                    msg.epoch
                )));
            }
            (Role::Secondary, Role::Secondary) => {}
        }
        let max_seq = self.plane.log().max_seq();
        let pull = (msg.role == Role::Primary && msg.max_seq > max_seq)
            .then_some((max_seq + 1, msg.max_seq));
        Ok(HeartbeatAck::Ok {
            epoch: self.epoch,
            max_seq,
            pull,
        })
    }

    /// Handles the peer's answer to one of our heartbeats.
    pub fn record_ack(&mut self, ack: &HeartbeatAck) -> Result<()> {
        match *ack {
            HeartbeatAck::Ok { epoch, max_seq, .. } => {
                if epoch > self.epoch {
                    self.observe_epoch(epoch)?;
                } else if self.role == Role::Primary && epoch == self.epoch {
                    self.peer_acked = self.peer_acked.max(max_seq.min(self.plane.log().max_seq()));
                }
            }
            HeartbeatAck::StaleEpoch { current_epoch } => self.observe_epoch(current_epoch)?,
        }
        Ok(())
    }

    /// Applies shipped records that extend the local log; older ones are skipped
    /// and a gap stops application.
    pub fn replicate(&mut self, records: &[LogRecord]) -> Result<u64> {
        for r in records {
            let next = self.plane.log().max_seq() + 1;
            if r.seq < next {
                continue;
            }
            if r.seq > next {
                break;
            }
            self.plane.ingest(r.clone())?;
        }
        self.epoch = self.epoch.max(self.plane.epoch());
        Ok(self.plane.log().max_seq())
    }

    /// A higher epoch exists: a primary steps down and discards its log so it
    /// can resync from sequence 1.
    fn observe_epoch(&mut self, epoch: u64) -> Result<()> {
        if epoch <= self.epoch {
            return Ok(());
        }
        self.epoch = epoch;
        if self.role == Role::Primary {
            tracing::warn!(replica = self.plane.replica(), epoch, "deposed; resyncing");
            self.role = Role::Secondary;
            self.plane.reset_log()?;
        }
        Ok(())
    }

    /// Promotes a secondary whose primary has been silent for longer than the
    /// failover timeout.
    pub fn failover_check(&mut self, now: Millis) -> Result<Option<PromotionEvent>> {
        if self.role != Role::Secondary
            || now.saturating_sub(self.last_peer_heartbeat) <= self.config.failover_timeout
        {
            return Ok(None);
        }
        if self.plane.epoch() < self.epoch {
            // Still resyncing from a newer primary; nothing to promote from.
            return Ok(None);
        }
        self.promote(now).map(Some)
    }

    pub fn promote(&mut self, now: Millis) -> Result<PromotionEvent> {
        self.plane.rebuild()?;
        let epoch = self.epoch.max(self.plane.epoch()) + 1;
        self.plane.emit(Event::EpochStarted {
            epoch,
            replica: self.plane.replica().to_owned(),
        })?;
        self.epoch = epoch;
        self.role = Role::Primary;
        self.peer_acked = 0;
        self.last_peer_heartbeat = now;
        Ok(PromotionEvent {
            replica: self.plane.replica().to_owned(),
            epoch,
            at: now,
            max_seq: self.plane.log().max_seq() - 1,
        })
    }
}

impl ControlPlane {
    /// Replays the log into fresh state and clears runtime-only bookkeeping.
    pub fn rebuild(&mut self) -> Result<()> {
        self.state = ControlState::from_records(&self.log.replay(1)?)?;
        self.head_wait = None;
        self.barriers.clear();
        self.directives.clear();
        Ok(())
    }

    /// Drops all local records and state (used by a deposed primary).
    pub fn reset_log(&mut self) -> Result<()> {
        self.log = match self.log.path().map(|p| p.to_path_buf()) {
            Some(path) => {
                std::fs::remove_file(&path).map_err(crate::log::LogError::from)?;
                EventLog::open(path)?
            }
            None => EventLog::in_memory(),
        };
        self.state = ControlState::default();
        self.head_wait = None;
        self.barriers.clear();
        self.directives.clear();
        self.outbox.clear();
        Ok(())
    }
}
