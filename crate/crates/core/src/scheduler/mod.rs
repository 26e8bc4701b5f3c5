//! Admission, FIFO-with-backfill queueing, binding and release, credit
//! metering on ticks, and handling of node-agent reports.

pub mod failover;
pub mod placement;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::control::{ControlPlane, Directive, TaskSpec};
use crate::domain::{NodeDescriptor, NotificationKind, ResourceRequest, Session, SessionState};
use crate::error::{Error, RejectReason, Result};
use crate::event::Event;
use crate::ids::{DatasetId, NodeId, SessionId, UserId};
use crate::session::sweep::{Strategy, SweepSpec};

pub use placement::{place, PlacementKey, PlacementPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum AdmissionDecision {
    Accepted { position: usize },
    Rejected { reason: RejectReason },
}

/// How a task ended on its node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum TaskOutcome {
    Done,
    Failed { step: u64 },
    KilledOom { step: u64 },
}

/// What a node did while preparing a session's environment.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub dataset_copied: bool,
    pub image_pulled: bool,
    pub evicted: Vec<DatasetId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub bindings: Vec<(SessionId, NodeId)>,
    pub charged: BTreeMap<UserId, u64>,
    pub safe_stopped: Vec<SessionId>,
}

/// Milliseconds `session` spent Running inside `(from, to]`.
pub fn running_ms(session: &Session, from: u64, to: u64) -> u64 {
    let mut total = 0;
    let mut entered: Option<u64> = None;
    for t in &session.history {
        if t.to == SessionState::Running {
            entered = Some(t.at);
        } else if t.from == SessionState::Running {
            if let Some(start) = entered.take() {
                total += overlap(start, t.at, from, to);
            }
        }
    }
    if let (Some(start), SessionState::Running) = (entered, session.state) {
        total += overlap(start, to, from, to);
    }
    total
}

fn overlap(a0: u64, a1: u64, b0: u64, b1: u64) -> u64 {
    a1.min(b1).saturating_sub(a0.max(b0))
}

impl ControlPlane {
    pub fn register_node(
        &mut self,
        node_id: NodeId,
        total_gpus: u32,
        total_memory: u64,
    ) -> Result<NodeDescriptor> {
        if total_memory == 0 {
            return Err(Error::invalid("node memory must be positive"));
        }
        if self.state.nodes.contains_key(&node_id) {
            return Err(Error::Duplicate {
                kind: "node",
                id: node_id.to_string(),
            });
        }
        let node = NodeDescriptor::new(node_id, total_gpus, total_memory, self.now());
        self.emit(Event::NodeRegistered { node: node.clone() })?;
        Ok(node)
    }

    /// Decides whether `user` may queue `request`. Permission is checked before
    /// credit, and credit before feasibility. Pure.
    pub fn admit(&self, user: &UserId, request: &ResourceRequest) -> Result<AdmissionDecision> {
        request.validate()?;
        let account = self.state.user(user)?;
        let visible = self
            .state
            .datasets
            .get(&request.dataset_id)
            .is_some_and(|d| d.visible_to(account));
        let reject = |reason| Ok(AdmissionDecision::Rejected { reason });
        if !visible {
            return reject(RejectReason::PermissionDenied);
        }
        if account.credit_balance == 0 {
            return reject(RejectReason::CreditExhausted);
        }
        if !self
            .state
            .nodes
            .values()
            .any(|n| n.fits_when_empty(request))
        {
            return reject(RejectReason::Infeasible);
        }
        Ok(AdmissionDecision::Accepted {
            position: self.state.queue.len() + 1,
        })
    }

    fn live_nodes(&self) -> Vec<NodeDescriptor> {
        self.state
            .nodes
            .values()
            .filter(|n| n.is_alive())
            .cloned()
            .collect()
    }

    /// Places queued tickets in FIFO order. A head that cannot fit keeps its
    /// position while later tickets backfill; once it has been blocked for
    /// `backfill_grace_ticks` drains, backfill stops using the node closest to
    /// fitting it so the head cannot starve.
    pub fn drain_queue(&mut self) -> Result<Vec<(SessionId, NodeId)>> {
        let mut placed = Vec::new();
        let queue: Vec<SessionId> = self.state.queue.iter().cloned().collect();
        let mut head_seen = false;
        let mut reserved: Option<NodeId> = None;
        for sid in queue {
            let session = self.state.session(&sid)?;
            if self.state.user(&session.owner)?.credit_balance == 0 {
                continue;
            }
            let request = session.resources.clone();
            let is_head = !head_seen;
            head_seen = true;
            let candidates: Vec<NodeDescriptor> = self
                .live_nodes()
                .into_iter()
                .filter(|n| reserved.as_ref() != Some(&n.node_id))
                .collect();
            let policy = self.config.placement;
            match policy.choose(&request, &candidates, &mut self.rng) {
                Some(node_id) => {
                    self.bind(&sid, &node_id)?;
                    if is_head {
                        self.head_wait = None;
                    }
                    placed.push((sid, node_id));
                }
                None if is_head => {
                    let waited = match &self.head_wait {
                        Some((id, n)) if *id == sid => n + 1,
                        _ => 1,
                    };
                    self.head_wait = Some((sid.clone(), waited));
                    if waited > self.config.backfill_grace_ticks {
                        reserved = self
                            .live_nodes()
                            .into_iter()
                            .filter(|n| n.fits_when_empty(&request))
                            .max_by(|a, b| {
                                a.available_gpus
                                    .cmp(&b.available_gpus)
                                    .then(a.available_memory.cmp(&b.available_memory))
                                    .then(b.node_id.cmp(&a.node_id))
                            })
                            .map(|n| n.node_id);
                    }
                }
                None => {}
            }
        }
        Ok(placed)
    }

    /// Reserves resources for a queued session on `node_id` and asks the node
    /// to start preparing it.
    pub fn bind(&mut self, sid: &SessionId, node_id: &NodeId) -> Result<NodeDescriptor> {
        let session = self.state.session(sid)?;
        if session.state != SessionState::Queued {
            return Err(Error::InvalidState {
                session: sid.to_string(),
                state: session.state,
                action: "bind",
            });
        }
        let node = self.state.node(node_id)?;
        if !node.is_alive() || !node.fits_now(&session.resources) {
            return Err(Error::invalid(format!("{node_id} cannot host {sid}")));
        }
        let gpus: Vec<u32> = self
            .state
            .free_gpu_indices(node)
            .into_iter()
            .take(session.resources.gpus as usize)
            .collect();
        let memory = session.resources.memory;
        self.emit(Event::Bound {
            session_id: sid.clone(),
            node_id: node_id.clone(),
            gpus,
            memory,
        })?;
        let spec = self.task_spec(sid)?;
        self.directives.push(Directive::Start(Box::new(spec)));
        Ok(self.state.node(node_id)?.clone())
    }

    /// Returns a session's resources to its node. Releasing twice is a no-op.
    pub fn release(&mut self, sid: &SessionId) -> Result<Option<NodeDescriptor>> {
        let Some(binding) = self.state.bindings.get(sid).cloned() else {
            tracing::warn!(session = %sid, "release of unbound session ignored");
            return Ok(None);
        };
        self.emit(Event::Released {
            session_id: sid.clone(),
        })?;
        Ok(Some(self.state.node(&binding.node_id)?.clone()))
    }

    /// The node refused a start (it died or fenced this epoch): requeue at the head.
    pub fn bind_failed(&mut self, sid: &SessionId) -> Result<()> {
        let session = self.state.session(sid)?;
        if session.state != SessionState::Preparing {
            return Ok(());
        }
        self.release(sid)?;
        self.emit(Event::Transitioned {
            session_id: sid.clone(),
            to: SessionState::Queued,
            reason: "bind failed".into(),
        })?;
        self.emit(Event::Enqueued {
            session_id: sid.clone(),
            front: true,
        })?;
        Ok(())
    }

    pub(crate) fn task_spec(&self, sid: &SessionId) -> Result<TaskSpec> {
        let s = self.state.session(sid)?;
        let binding = self
            .state
            .bindings
            .get(sid)
            .ok_or_else(|| Error::Invariant(format!("{sid} is not bound")))?;
        let dataset = self
            .state
            .datasets
            .get(&s.dataset_id)
            .ok_or_else(|| Error::not_found("dataset", &s.dataset_id))?;
        let barrier_interval = s
            .sweep
            .as_ref()
            .and_then(|id| self.state.sweeps.get(id))
            .filter(|sw| matches!(sw.spec.strategy, Strategy::Pbt { .. }))
            .map(|_| SweepSpec::pbt_interval(&s.profile));
        Ok(TaskSpec {
            session_id: sid.clone(),
            node_id: binding.node_id.clone(),
            epoch: self.state.epoch,
            seed: s.seed,
            config: s.config.clone(),
            profile: s.profile.clone(),
            dataset_id: s.dataset_id.clone(),
            dataset_size: dataset.size,
            image_id: s.image_id.clone(),
            gpus: binding.gpus.clone(),
            memory: binding.memory,
            start_step: s.start_step,
            recorded_until: self.state.last_metric_step(sid).max(s.start_step),
            attempt: s.attempt,
            barrier_interval,
        })
    }

    /// One scheduler tick: meter usage, enforce credit exhaustion, drain the queue.
    pub fn tick(&mut self) -> Result<TickReport> {
        let mut report = TickReport::default();
        let now = self.now();
        let from = self.state.metered_until;
        if now > from {
            let mut usage: BTreeMap<UserId, u64> = BTreeMap::new();
            for s in self.state.sessions.values() {
                if s.resources.gpus == 0 {
                    continue;
                }
                let ms = running_ms(s, from, now);
                if ms > 0 {
                    *usage.entry(s.owner.clone()).or_default() += ms * s.resources.gpus as u64;
                }
            }
            for (user, gpu_ms) in usage {
                let outcome = self.charge_credit(&user, gpu_ms)?;
                report.charged.insert(user, outcome.charged);
            }
            self.emit(Event::Metered { until: now })?;
        }
        let exhausted: Vec<SessionId> = self
            .state
            .sessions
            .values()
            .filter(|s| matches!(s.state, SessionState::Running | SessionState::Preparing))
            .filter(|s| {
                self.state
                    .users
                    .get(&s.owner)
                    .is_some_and(|u| u.credit_balance == 0)
            })
            .map(|s| s.session_id.clone())
            .collect();
        for sid in exhausted {
            self.safe_stop(&sid, "credit exhausted", Some(NotificationKind::CreditStop))?;
            report.safe_stopped.push(sid);
        }
        self.check_barriers()?;
        report.bindings = self.drain_queue()?;
        Ok(report)
    }

    fn bound_on(&self, sid: &SessionId, node: &NodeId, state: SessionState) -> bool {
        self.state
            .sessions
            .get(sid)
            .is_some_and(|s| s.state == state && s.node_id.as_ref() == Some(node))
    }

    /// Environment ready on the node; the session starts running.
    pub fn on_prepared(
        &mut self,
        sid: &SessionId,
        node_id: &NodeId,
        report: &PrepareReport,
    ) -> Result<bool> {
        if !self.bound_on(sid, node_id, SessionState::Preparing) {
            return Ok(false);
        }
        let (dataset_id, image_id) = {
            let s = self.state.session(sid)?;
            (s.dataset_id.clone(), s.image_id.clone())
        };
        if self.config.cache_enabled {
            for evicted in &report.evicted {
                if self.state.node(node_id)?.cached_datasets.contains(evicted) {
                    self.emit(Event::DatasetEvicted {
                        node_id: node_id.clone(),
                        dataset_id: evicted.clone(),
                    })?;
                }
            }
            let node = self.state.node(node_id)?;
            let cache_dataset = !node.cached_datasets.contains(&dataset_id);
            let cache_image = !node.cached_images.contains(&image_id);
            if cache_dataset {
                self.emit(Event::DatasetCached {
                    node_id: node_id.clone(),
                    dataset_id: dataset_id.clone(),
                })?;
            }
            if cache_image {
                self.emit(Event::ImageCached {
                    node_id: node_id.clone(),
                    image_id,
                })?;
            }
        }
        self.emit(Event::DatasetAccessed { dataset_id })?;
        self.emit(Event::Transitioned {
            session_id: sid.clone(),
            to: SessionState::Running,
            reason: "environment ready".into(),
        })?;
        Ok(true)
    }

    /// Records one completed training step, checkpointing on the cadence.
    pub fn on_step(
        &mut self,
        sid: &SessionId,
        node_id: &NodeId,
        step: u64,
        metrics: Vec<(String, f64)>,
    ) -> Result<bool> {
        if !self.bound_on(sid, node_id, SessionState::Running) {
            return Ok(false);
        }
        if step <= self.state.last_metric_step(sid) {
            return Ok(false);
        }
        self.emit(Event::StepCompleted {
            session_id: sid.clone(),
            step,
            metrics,
        })?;
        let profile = &self.state.session(sid)?.profile;
        if step.is_multiple_of(profile.checkpoint_interval()) || step >= profile.steps_total {
            self.save_checkpoint(sid, step)?;
        }
        Ok(true)
    }

    pub fn on_finished(
        &mut self,
        sid: &SessionId,
        node_id: &NodeId,
        outcome: TaskOutcome,
    ) -> Result<bool> {
        if !self.bound_on(sid, node_id, SessionState::Running) {
            return Ok(false);
        }
        match outcome {
            TaskOutcome::Done => {
                let step = self.state.session(sid)?.progress_step;
                self.save_checkpoint(sid, step)?;
                self.end_session(sid, SessionState::Done, "completed")?;
            }
            TaskOutcome::Failed { step } => {
                let reason = format!("workload failed at step {step}");
                self.end_session(sid, SessionState::Failed, &reason)?;
                self.notify(sid, NotificationKind::Failed, reason)?;
            }
            TaskOutcome::KilledOom { step } => {
                let s = self.state.session(sid)?;
                let reason = format!(
                    "memory use {} exceeded allocation {} at step {step}",
                    s.profile.memory_at(step),
                    s.resources.memory
                );
                self.end_session(sid, SessionState::KilledOom, &reason)?;
                self.notify(sid, NotificationKind::KilledOom, reason)?;
            }
        }
        Ok(true)
    }

    /// Marks a node dead. Preparing sessions go back to the queue head; running
    /// ones fail and their owners are notified.
    pub fn on_node_dead(&mut self, node_id: &NodeId) -> Result<Vec<SessionId>> {
        if !self.state.node(node_id)?.is_alive() {
            return Ok(Vec::new());
        }
        let affected: Vec<(SessionId, SessionState)> = self
            .state
            .sessions
            .values()
            .filter(|s| s.node_id.as_ref() == Some(node_id))
            .map(|s| (s.session_id.clone(), s.state))
            .collect();
        let mut failed = Vec::new();
        for (sid, state) in affected {
            match state {
                SessionState::Preparing => self.bind_failed(&sid)?,
                SessionState::Running => {
                    self.end_session(&sid, SessionState::Failed, "node died")?;
                    self.notify(
                        &sid,
                        NotificationKind::NodeDead,
                        format!("node {node_id} died"),
                    )?;
                    failed.push(sid);
                }
                SessionState::Serving => {
                    self.end_session(&sid, SessionState::Stopped, "serving node died")?;
                }
                _ => {}
            }
        }
        self.emit(Event::NodeDied {
            node_id: node_id.clone(),
        })?;
        Ok(failed)
    }

    /// Releases resources (if held) and moves to a node-free state.
    pub(crate) fn end_session(
        &mut self,
        sid: &SessionId,
        to: SessionState,
        reason: &str,
    ) -> Result<()> {
        if self.state.bindings.contains_key(sid) {
            self.release(sid)?;
        }
        self.emit(Event::Transitioned {
            session_id: sid.clone(),
            to,
            reason: reason.into(),
        })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
