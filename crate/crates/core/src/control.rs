//! The control plane: validated commands in, events out.
//!
//! Every mutation goes through [`ControlPlane::emit`], which folds the event
//! into [`ControlState`] and appends it to the [`EventLog`]. Replaying the log
//! from sequence 1 therefore rebuilds the live state exactly.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, Millis};
use crate::domain::{Config, Notification, WorkloadProfile};
use crate::error::{Error, Result};
use crate::event::Event;
use crate::ids::{DatasetId, ImageId, NodeId, SessionId, SweepId};
use crate::log::{EventLog, LogRecord};
use crate::registry::CreditRate;
use crate::scheduler::placement::PlacementPolicy;
use crate::state::ControlState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaneConfig {
    pub credit_rate: CreditRate,
    /// When false, datasets and images are never retained on nodes.
    pub cache_enabled: bool,
    /// Per-node dataset cache capacity in bytes; unlimited when absent.
    pub cache_capacity: Option<u64>,
    pub placement: PlacementPolicy,
    /// Ticks a blocked queue head waits before backfill stops using its node.
    pub backfill_grace_ticks: u32,
    pub placement_seed: u64,
}

impl Default for PlaneConfig {
    fn default() -> Self {
        Self {
            credit_rate: CreditRate::default(),
            cache_enabled: true,
            cache_capacity: None,
            placement: PlacementPolicy::DefragLocality,
            backfill_grace_ticks: 10,
            placement_seed: 0,
        }
    }
}

/// What a node agent needs to run (or keep running) a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub session_id: SessionId,
    pub node_id: NodeId,
    pub epoch: u64,
    pub seed: u64,
    pub config: Config,
    pub profile: WorkloadProfile,
    pub dataset_id: DatasetId,
    pub dataset_size: u64,
    pub image_id: ImageId,
    pub gpus: Vec<u32>,
    pub memory: u64,
    /// Training resumes after this step.
    pub start_step: u64,
    /// Steps up to here are already recorded and are not re-reported.
    pub recorded_until: u64,
    pub attempt: u32,
    /// Pause at multiples of this step count (synchronous PBT).
    pub barrier_interval: Option<u64>,
}

/// Instructions for node agents produced by control-plane commands.
#[derive(Debug, Clone, PartialEq)]
pub enum Directive {
    Start(Box<TaskSpec>),
    Stop {
        session_id: SessionId,
        node_id: NodeId,
        epoch: u64,
    },
    /// Release a barrier, optionally swapping in a new config.
    Continue {
        session_id: SessionId,
        node_id: NodeId,
        epoch: u64,
        config: Option<Config>,
    },
}

pub struct ControlPlane {
    pub(crate) replica: String,
    pub(crate) log: EventLog,
    pub(crate) state: ControlState,
    pub(crate) clock: Arc<dyn Clock>,
    pub(crate) config: PlaneConfig,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) directives: Vec<Directive>,
    pub(crate) outbox: Vec<Notification>,
    /// Head ticket and how many ticks it has been blocked.
    pub(crate) head_wait: Option<(SessionId, u32)>,
    /// PBT members paused at a barrier, by sweep: member -> step.
    pub(crate) barriers: BTreeMap<SweepId, BTreeMap<SessionId, u64>>,
}

impl std::fmt::Debug for ControlPlane {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlPlane")
            .field("replica", &self.replica)
            .field("epoch", &self.state.epoch)
            .field("max_seq", &self.log.max_seq())
            .finish()
    }
}

impl ControlPlane {
    /// Opens a plane over `log`, replaying whatever it already holds.
    pub fn new(
        replica: impl Into<String>,
        log: EventLog,
        clock: Arc<dyn Clock>,
        config: PlaneConfig,
    ) -> Result<Self> {
        let state = ControlState::from_records(&log.replay(1)?)?;
        let rng = ChaCha8Rng::seed_from_u64(config.placement_seed);
        Ok(Self {
            replica: replica.into(),
            log,
            state,
            clock,
            config,
            rng,
            directives: Vec::new(),
            outbox: Vec::new(),
            head_wait: None,
            barriers: BTreeMap::new(),
        })
    }

    pub fn in_memory(clock: Arc<dyn Clock>, config: PlaneConfig) -> Self {
        Self::new("primary", EventLog::in_memory(), clock, config).expect("empty log replays")
    }

    pub fn replica(&self) -> &str {
        &self.replica
    }

    pub fn state(&self) -> &ControlState {
        &self.state
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn config(&self) -> &PlaneConfig {
        &self.config
    }

    pub fn now(&self) -> Millis {
        self.clock.now()
    }

    pub fn epoch(&self) -> u64 {
        self.state.epoch
    }

    /// Applies and appends one event; returns its log sequence.
    pub fn emit(&mut self, event: Event) -> Result<u64> {
        let ts = self.clock.now();
        self.state.apply(&event, ts)?;
        if let Event::NotificationIssued { notification } = &event {
            self.outbox.push(notification.clone());
        }
        let (kind, id) = event.entity();
        let payload = serde_json::to_value(&event).map_err(crate::log::LogError::from)?;
        Ok(self.log.append(kind, &id, ts, payload)?)
    }

    /// Applies a record shipped from the primary, keeping its sequence.
    pub fn ingest(&mut self, record: LogRecord) -> Result<()> {
        let expected = self.log.max_seq() + 1;
        if record.seq != expected {
            return Err(crate::log::LogError::Gap {
                expected,
                found: record.seq,
            }
            .into());
        }
        self.state.apply_record(&record)?;
        self.log.append_record(record)?;
        Ok(())
    }

    /// Directives produced since the last call.
    pub fn take_directives(&mut self) -> Vec<Directive> {
        std::mem::take(&mut self.directives)
    }

    /// Notifications issued since the last call.
    pub fn take_notifications(&mut self) -> Vec<Notification> {
        std::mem::take(&mut self.outbox)
    }

    /// Rebuilds state from the log and compares it with the live state.
    pub fn verify_replay(&self) -> Result<()> {
        let replayed = ControlState::from_records(&self.log.replay(1)?)?;
        if replayed != self.state {
            return Err(Error::Invariant(
                "replayed state differs from live state".into(),
            ));
        }
        Ok(())
    }
}
