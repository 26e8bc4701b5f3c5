//! The replayable control-plane state: a left fold of [`Event`]s.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::domain::{
    Checkpoint, Dataset, Liveness, Memo, NodeDescriptor, Notification, Session, SessionState,
    Submission, Transition, UserAccount,
};
use crate::error::{Error, Result};
use crate::event::Event;
use crate::ids::{NodeId, SessionId, SweepId, UserId};
use crate::log::LogRecord;
use crate::session::sweep::Sweep;

/// Resources reserved for a session on one node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Binding {
    pub node_id: NodeId,
    pub gpus: Vec<u32>,
    pub memory: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: u64,
    pub name: String,
    pub value: f64,
    pub ts: Millis,
}

/// Cumulative metered usage for one user.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreditMeter {
    pub gpu_ms: u64,
    pub charged: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub epoch: u64,
    /// Replica that started each epoch.
    pub epochs: BTreeMap<u64, String>,
    pub nodes: BTreeMap<NodeId, NodeDescriptor>,
    pub bindings: BTreeMap<SessionId, Binding>,
    pub queue: VecDeque<SessionId>,
    pub sessions: BTreeMap<SessionId, Session>,
    /// Survives `rm`, so lineage is never orphaned.
    pub lineage: BTreeMap<SessionId, Option<SessionId>>,
    /// Next sequence number per `user/dataset`.
    pub session_seq: BTreeMap<String, u64>,
    pub metrics: BTreeMap<SessionId, Vec<MetricPoint>>,
    pub checkpoints: BTreeMap<SessionId, Vec<Checkpoint>>,
    pub memos: BTreeMap<SessionId, Vec<Memo>>,
    pub datasets: BTreeMap<crate::ids::DatasetId, Dataset>,
    pub users: BTreeMap<UserId, UserAccount>,
    pub meters: BTreeMap<UserId, CreditMeter>,
    pub metered_until: Millis,
    pub submissions: Vec<Submission>,
    pub notifications: Vec<Notification>,
    pub sweeps: BTreeMap<SweepId, Sweep>,
    pub next_checkpoint: u64,
    pub next_submission: u64,
    pub next_sweep: u64,
}

fn missing(kind: &'static str, id: impl ToString) -> Error {
    Error::Invariant(format!("{kind} `{}` unknown", id.to_string()))
}

impl ControlState {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a LogRecord>) -> Result<Self> {
        let mut state = ControlState::default();
        for r in records {
            state.apply_record(r)?;
        }
        Ok(state)
    }

    pub fn apply_record(&mut self, record: &LogRecord) -> Result<()> {
        let event: Event = serde_json::from_value(record.payload.clone()).map_err(|e| {
            Error::Invariant(format!(
                "record {} has undecodable payload: {e}",
                record.seq
            ))
        })?;
        self.apply(&event, record.ts)
            .map_err(|e| Error::Invariant(format!("record {}: {e}", record.seq)))
    }

    pub fn session(&self, id: &SessionId) -> Result<&Session> {
        self.sessions
            .get(id)
            .ok_or_else(|| Error::not_found("session", id))
    }

    pub fn user(&self, id: &UserId) -> Result<&UserAccount> {
        self.users
            .get(id)
            .ok_or_else(|| Error::not_found("user", id))
    }

    pub fn node(&self, id: &NodeId) -> Result<&NodeDescriptor> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::not_found("node", id))
    }

    pub fn latest_checkpoint(&self, id: &SessionId) -> Option<&Checkpoint> {
        self.checkpoints.get(id).and_then(|c| c.last())
    }

    pub fn last_metric_step(&self, id: &SessionId) -> u64 {
        self.metrics
            .get(id)
            .and_then(|m| m.last())
            .map_or(0, |p| p.step)
    }

    /// GPU indices on `node` not reserved by any binding, ascending.
    pub fn free_gpu_indices(&self, node: &NodeDescriptor) -> Vec<u32> {
        let used: BTreeSet<u32> = self
            .bindings
            .values()
            .filter(|b| b.node_id == node.node_id)
            .flat_map(|b| b.gpus.iter().copied())
            .collect();
        (0..node.total_gpus).filter(|g| !used.contains(g)).collect()
    }

    /// Conservation and per-type invariants over the whole state.
    pub fn check_invariants(&self) -> Result<()> {
        let mut bound: BTreeMap<&NodeId, (u64, u64)> = BTreeMap::new();
        for (sid, b) in &self.bindings {
            let e = bound.entry(&b.node_id).or_default();
            e.0 += b.gpus.len() as u64;
            e.1 += b.memory;
            let session = self.session(sid)?;
            if session.node_id.as_ref() != Some(&b.node_id) {
                return Err(Error::Invariant(format!(
                    "binding of {sid} on {} but session says {:?}",
                    b.node_id, session.node_id
                )));
            }
        }
        for node in self.nodes.values() {
            node.validate()?;
            let (gpus, mem) = bound.get(&node.node_id).copied().unwrap_or_default();
            if gpus > node.total_gpus as u64 || mem > node.total_memory {
                return Err(Error::Invariant(format!(
                    "node {} oversubscribed: {gpus} GPUs / {mem} bytes bound",
                    node.node_id
                )));
            }
            if gpus + node.available_gpus as u64 != node.total_gpus as u64
                || mem + node.available_memory != node.total_memory
            {
                return Err(Error::Invariant(format!(
                    "node {} accounting drift",
                    node.node_id
                )));
            }
            if !node.is_alive() && gpus > 0 {
                return Err(Error::Invariant(format!(
                    "dead node {} still has bound sessions",
                    node.node_id
                )));
            }
        }
        for s in self.sessions.values() {
            s.validate()?;
        }
        Ok(())
    }

    pub fn apply(&mut self, event: &Event, ts: Millis) -> Result<()> {
        use Event::*;
        match event {
            EpochStarted { epoch, replica } => {
                if *epoch <= self.epoch {
                    return Err(Error::Invariant(format!(
                        "epoch {epoch} does not advance {}",
                        self.epoch
                    )));
                }
                self.epoch = *epoch;
                self.epochs.insert(*epoch, replica.clone());
            }
            NodeRegistered { node } => {
                if self.nodes.contains_key(&node.node_id) {
                    return Err(Error::Duplicate {
                        kind: "node",
                        id: node.node_id.to_string(),
                    });
                }
                node.validate()?;
                self.nodes.insert(node.node_id.clone(), node.clone());
            }
            NodeDied { node_id } => {
                let node = self
                    .nodes
                    .get_mut(node_id)
                    .ok_or_else(|| missing("node", node_id))?;
                node.liveness = Liveness::Dead;
            }
            DatasetCached {
                node_id,
                dataset_id,
            } => {
                let node = self
                    .nodes
                    .get_mut(node_id)
                    .ok_or_else(|| missing("node", node_id))?;
                node.cached_datasets.insert(dataset_id.clone());
                node.last_heartbeat = node.last_heartbeat.max(ts);
            }
            DatasetEvicted {
                node_id,
                dataset_id,
            } => {
                let node = self
                    .nodes
                    .get_mut(node_id)
                    .ok_or_else(|| missing("node", node_id))?;
                node.cached_datasets.remove(dataset_id);
            }
            ImageCached { node_id, image_id } => {
                let node = self
                    .nodes
                    .get_mut(node_id)
                    .ok_or_else(|| missing("node", node_id))?;
                node.cached_images.insert(image_id.clone());
            }
            DatasetPushed { dataset } => {
                if self.datasets.contains_key(&dataset.dataset_id) {
                    return Err(Error::Duplicate {
                        kind: "dataset",
                        id: dataset.dataset_id.to_string(),
                    });
                }
                if dataset.size == 0 {
                    return Err(Error::invalid("dataset size must be positive"));
                }
                self.datasets
                    .insert(dataset.dataset_id.clone(), dataset.clone());
            }
            DatasetAccessed { dataset_id } => {
                let ds = self
                    .datasets
                    .get_mut(dataset_id)
                    .ok_or_else(|| missing("dataset", dataset_id))?;
                ds.last_access = ds.last_access.max(ts);
            }
            UserCreated { account } => {
                if self.users.contains_key(&account.user_id) {
                    return Err(Error::Duplicate {
                        kind: "user",
                        id: account.user_id.to_string(),
                    });
                }
                self.users.insert(account.user_id.clone(), account.clone());
            }
            CreditSet { user_id, balance } => {
                self.user_mut(user_id)?.credit_balance = *balance;
            }
            RoleSet { user_id, role } => {
                self.user_mut(user_id)?.role = *role;
            }
            TeamJoined { user_id, team } => {
                self.user_mut(user_id)?.teams.insert(team.clone());
            }
            TeamLeft { user_id, team } => {
                self.user_mut(user_id)?.teams.remove(team);
            }
            CreditCharged {
                user_id,
                gpu_ms,
                credits,
            } => {
                let user = self.user_mut(user_id)?;
                user.credit_balance = user.credit_balance.saturating_sub(*credits);
                let meter = self.meters.entry(user_id.clone()).or_default();
                meter.gpu_ms += gpu_ms;
                meter.charged += credits;
            }
            Metered { until } => {
                self.metered_until = self.metered_until.max(*until);
            }
            SessionCreated { session } => {
                if self.sessions.contains_key(&session.session_id)
                    || self.lineage.contains_key(&session.session_id)
                {
                    return Err(Error::Duplicate {
                        kind: "session",
                        id: session.session_id.to_string(),
                    });
                }
                if session.state != SessionState::Queued {
                    return Err(Error::Invariant("sessions are created Queued".into()));
                }
                if let Some(parent) = &session.parent {
                    if !self.lineage.contains_key(parent) {
                        return Err(missing("parent session", parent));
                    }
                }
                let (user, dataset, seq) = session
                    .session_id
                    .parts()
                    .ok_or_else(|| Error::invalid("malformed session id"))?;
                let key = format!("{user}/{dataset}");
                let next = self.session_seq.entry(key).or_insert(1);
                *next = (*next).max(seq + 1);
                self.lineage
                    .insert(session.session_id.clone(), session.parent.clone());
                self.sessions
                    .insert(session.session_id.clone(), session.as_ref().clone());
            }
            Enqueued { session_id, front } => {
                let s = self.session(session_id)?;
                if s.state != SessionState::Queued {
                    return Err(Error::Invariant(format!(
                        "cannot enqueue {session_id} in {:?}",
                        s.state
                    )));
                }
                if self.queue.contains(session_id) {
                    return Err(Error::Invariant(format!("{session_id} already queued")));
                }
                if *front {
                    self.queue.push_front(session_id.clone());
                } else {
                    self.queue.push_back(session_id.clone());
                }
            }
            Bound {
                session_id,
                node_id,
                gpus,
                memory,
            } => {
                let state = self.session(session_id)?.state;
                if state != SessionState::Queued {
                    return Err(Error::Invariant(format!(
                        "bind of {session_id} in {state:?}"
                    )));
                }
                self.reserve(session_id, node_id, gpus, *memory)?;
                self.queue.retain(|q| q != session_id);
                self.transition(session_id, SessionState::Preparing, "bound", ts)?;
                let s = self.sessions.get_mut(session_id).expect("checked above");
                s.node_id = Some(node_id.clone());
                s.last_node = Some(node_id.clone());
            }
            Released { session_id } => {
                let binding = self
                    .bindings
                    .remove(session_id)
                    .ok_or_else(|| Error::Invariant(format!("{session_id} holds no binding")))?;
                let node = self
                    .nodes
                    .get_mut(&binding.node_id)
                    .ok_or_else(|| missing("node", &binding.node_id))?;
                node.available_gpus += binding.gpus.len() as u32;
                node.available_memory += binding.memory;
                node.validate()?;
            }
            Transitioned {
                session_id,
                to,
                reason,
            } => {
                if matches!(to, SessionState::Preparing | SessionState::Serving) {
                    return Err(Error::Invariant(format!(
                        "transition to {to:?} must go through bind or serve"
                    )));
                }
                if *to == SessionState::Running {
                    return self.transition(session_id, *to, reason, ts);
                }
                if self.bindings.contains_key(session_id) {
                    return Err(Error::Invariant(format!(
                        "{session_id} must release before leaving its node"
                    )));
                }
                self.transition(session_id, *to, reason, ts)?;
                let s = self.sessions.get_mut(session_id).expect("checked above");
                s.node_id = None;
                if to.is_terminal() {
                    s.finished_at = Some(ts);
                }
                if *to != SessionState::Queued {
                    self.queue.retain(|q| q != session_id);
                }
            }
            StepCompleted {
                session_id,
                step,
                metrics,
            } => {
                let s = self.session(session_id)?;
                if !matches!(s.state, SessionState::Running) {
                    return Err(Error::Invariant(format!(
                        "step for {session_id} in {:?}",
                        s.state
                    )));
                }
                let last = self.last_metric_step(session_id);
                if *step <= last && self.metrics.get(session_id).is_some_and(|m| !m.is_empty()) {
                    return Err(Error::Invariant(format!(
                        "duplicate step {step} for {session_id} (last {last})"
                    )));
                }
                let points = self.metrics.entry(session_id.clone()).or_default();
                let mut sorted = metrics.clone();
                sorted.sort_by(|a, b| a.0.cmp(&b.0));
                for (name, value) in sorted {
                    points.push(MetricPoint {
                        step: *step,
                        name,
                        value,
                        ts,
                    });
                }
                let s = self.sessions.get_mut(session_id).expect("checked above");
                s.progress_step = *step;
            }
            CheckpointSaved { checkpoint } => {
                self.session(&checkpoint.session_id)?;
                self.checkpoints
                    .entry(checkpoint.session_id.clone())
                    .or_default()
                    .push(checkpoint.clone());
                self.next_checkpoint += 1;
            }
            Resumed {
                session_id,
                from_step,
            } => {
                self.transition(session_id, SessionState::Queued, "resumed", ts)?;
                let s = self.sessions.get_mut(session_id).expect("checked above");
                s.start_step = *from_step;
                s.progress_step = *from_step;
                s.attempt += 1;
                s.finished_at = None;
            }
            Reconfigured {
                session_id, config, ..
            } => {
                let s = self
                    .sessions
                    .get_mut(session_id)
                    .ok_or_else(|| missing("session", session_id))?;
                s.config = config.clone();
            }
            ServingStarted {
                session_id,
                checkpoint_id,
                node_id,
                memory,
            } => {
                let state = self.session(session_id)?.state;
                if state != SessionState::Done {
                    return Err(Error::Invariant(format!(
                        "serve of {session_id} in {state:?}"
                    )));
                }
                self.reserve(session_id, node_id, &[], *memory)?;
                self.transition(session_id, SessionState::Serving, "serve", ts)?;
                let s = self.sessions.get_mut(session_id).expect("checked above");
                s.node_id = Some(node_id.clone());
                s.serving_checkpoint = Some(checkpoint_id.clone());
            }
            SessionRemoved { session_id } => {
                let s = self.session(session_id)?;
                if !s.state.is_terminal() {
                    return Err(Error::Invariant(format!("rm of non-terminal {session_id}")));
                }
                self.sessions.remove(session_id);
                self.metrics.remove(session_id);
                self.checkpoints.remove(session_id);
                self.memos.remove(session_id);
            }
            MemoAdded { session_id, memo } => {
                self.session(session_id)?;
                self.memos
                    .entry(session_id.clone())
                    .or_default()
                    .push(memo.clone());
            }
            SubmissionRecorded { submission } => {
                self.submissions.push(submission.clone());
                self.next_submission += 1;
            }
            NotificationIssued { notification } => {
                self.notifications.push(notification.clone());
            }
            SweepCreated { sweep } => {
                if self.sweeps.contains_key(&sweep.sweep_id) {
                    return Err(Error::Duplicate {
                        kind: "sweep",
                        id: sweep.sweep_id.to_string(),
                    });
                }
                self.sweeps
                    .insert(sweep.sweep_id.clone(), sweep.as_ref().clone());
                self.next_sweep += 1;
            }
            SweepMemberAdded {
                sweep_id,
                session_id,
            } => {
                self.sweep_mut(sweep_id)?.members.push(session_id.clone());
                if let Some(s) = self.sessions.get_mut(session_id) {
                    s.sweep = Some(sweep_id.clone());
                }
            }
            SweepSpawnRejected { sweep_id } => {
                self.sweep_mut(sweep_id)?.rejected += 1;
            }
            PbtGenerationCompleted {
                sweep_id,
                generation,
            } => {
                self.sweep_mut(sweep_id)?
                    .generations
                    .push(generation.clone());
            }
        }
        Ok(())
    }

    fn user_mut(&mut self, id: &UserId) -> Result<&mut UserAccount> {
        self.users.get_mut(id).ok_or_else(|| missing("user", id))
    }

    fn sweep_mut(&mut self, id: &SweepId) -> Result<&mut Sweep> {
        self.sweeps.get_mut(id).ok_or_else(|| missing("sweep", id))
    }

    fn reserve(
        &mut self,
        session_id: &SessionId,
        node_id: &NodeId,
        gpus: &[u32],
        memory: u64,
    ) -> Result<()> {
        if self.bindings.contains_key(session_id) {
            return Err(Error::Invariant(format!("{session_id} already bound")));
        }
        let node = self
            .nodes
            .get(node_id)
            .ok_or_else(|| missing("node", node_id))?;
        if !node.is_alive() {
            return Err(Error::Invariant(format!("bind to dead node {node_id}")));
        }
        let free = self.free_gpu_indices(node);
        if gpus.iter().any(|g| !free.contains(g))
            || gpus.iter().collect::<BTreeSet<_>>().len() != gpus.len()
        {
            return Err(Error::Invariant(format!(
                "GPUs {gpus:?} not free on {node_id}"
            )));
        }
        if node.available_gpus < gpus.len() as u32 || node.available_memory < memory {
            return Err(Error::Invariant(format!(
                "{node_id} cannot fit {session_id}"
            )));
        }
        let node = self.nodes.get_mut(node_id).expect("checked above");
        node.available_gpus -= gpus.len() as u32;
        node.available_memory -= memory;
        self.bindings.insert(
            session_id.clone(),
            Binding {
                node_id: node_id.clone(),
                gpus: gpus.to_vec(),
                memory,
            },
        );
        Ok(())
    }

    fn transition(
        &mut self,
        session_id: &SessionId,
        to: SessionState,
        reason: &str,
        ts: Millis,
    ) -> Result<()> {
        let s = self
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| missing("session", session_id))?;
        if !s.state.can_transition(to) {
            return Err(Error::Invariant(format!(
                "illegal transition {:?} -> {to:?} for {session_id}",
                s.state
            )));
        }
        if to == SessionState::Running && s.started_at.is_none() {
            s.started_at = Some(ts);
        }
        s.history.push(Transition {
            at: ts,
            from: s.state,
            to,
            reason: reason.to_owned(),
        });
        s.state = to;
        Ok(())
    }
}
