//! Session lifecycle: run, stop, rm, resume, fork and serve; metric and log
//! reads; checkpoints, submissions and the leaderboard; failure notifications.

pub mod automl;
pub mod compare;
pub mod evaluation;
pub mod export;
pub mod leaderboard;
pub mod notify;
pub mod sweep;

use serde::{Deserialize, Serialize};

use crate::control::{ControlPlane, Directive};
use crate::domain::{
    Checkpoint, Config, LogLine, Memo, MetricEvent, Notification, NotificationKind,
    ResourceRequest, Session, SessionState, Submission, WorkloadProfile,
};
use crate::error::{Error, RejectReason, Result};
use crate::event::Event;
use crate::ids::{CheckpointId, DatasetId, ImageId, SessionId, SweepId, TeamId, UserId};
use crate::scheduler::{place, AdmissionDecision};
use crate::sim::rng::{fnv1a, mix64};
use crate::sim::workload::checkpoint_digest;

pub use compare::{compare, Comparison};
pub use evaluation::InferenceOutput;
pub use leaderboard::{Leaderboard, LeaderboardEntry};

/// Everything needed to launch a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRequest {
    pub dataset_id: DatasetId,
    pub image_id: ImageId,
    #[serde(default)]
    pub config: Config,
    pub gpus: u32,
    pub memory: u64,
    pub profile: WorkloadProfile,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub team: Option<TeamId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForkRequest {
    #[serde(default)]
    pub overrides: Config,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionFilter {
    #[serde(default)]
    pub owner: Option<UserId>,
    #[serde(default)]
    pub state: Option<SessionState>,
    #[serde(default)]
    pub dataset: Option<DatasetId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventFilter {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub from_step: Option<u64>,
    #[serde(default)]
    pub to_step: Option<u64>,
}

fn state_error(session: &Session, action: &'static str) -> Error {
    Error::InvalidState {
        session: session.session_id.to_string(),
        state: session.state,
        action,
    }
}

impl ControlPlane {
    /// Owner, admin, or a member of the session's team who can also see its dataset.
    pub fn can_view(&self, user: &UserId, session: &Session) -> Result<bool> {
        let account = self.state.user(user)?;
        if account.is_admin() || &session.owner == user {
            return Ok(true);
        }
        let dataset_visible = self
            .state
            .datasets
            .get(&session.dataset_id)
            .is_some_and(|d| d.visible_to(account));
        Ok(dataset_visible && account.shares_team(session.team.as_ref()))
    }

    pub fn viewable(&self, user: &UserId, sid: &SessionId) -> Result<&Session> {
        let session = self.state.session(sid)?;
        if !self.can_view(user, session)? {
            return Err(Error::PermissionDenied(format!(
                "{user} may not view {sid}"
            )));
        }
        Ok(session)
    }

    fn mutable(&self, user: &UserId, sid: &SessionId) -> Result<&Session> {
        let session = self.state.session(sid)?;
        let account = self.state.user(user)?;
        if &session.owner != user && !account.is_admin() {
            return Err(Error::PermissionDenied(format!(
                "{user} does not own {sid}"
            )));
        }
        Ok(session)
    }

    fn fresh_seed(&self, sid: &SessionId) -> u64 {
        mix64(fnv1a(sid.as_str().as_bytes()) ^ self.config.placement_seed)
    }

    fn next_session_id(&self, user: &UserId, dataset: &DatasetId) -> SessionId {
        let seq = self
            .state
            .session_seq
            .get(&format!("{user}/{dataset}"))
            .copied()
            .unwrap_or(1);
        SessionId::compose(user, dataset, seq)
    }

    fn admit_or_reject(&self, user: &UserId, request: &ResourceRequest) -> Result<()> {
        match self.admit(user, request)? {
            AdmissionDecision::Accepted { .. } => Ok(()),
            AdmissionDecision::Rejected { reason } => Err(Error::Rejected(reason)),
        }
    }

    /// Creates and enqueues a session after admission.
    pub fn run(&mut self, user: &UserId, req: RunRequest) -> Result<SessionId> {
        self.create_session(user, req, None, 0, None)
    }

    pub(crate) fn create_session(
        &mut self,
        user: &UserId,
        req: RunRequest,
        parent: Option<SessionId>,
        start_step: u64,
        sweep: Option<SweepId>,
    ) -> Result<SessionId> {
        req.profile.validate()?;
        if let Some((name, _)) = req.config.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "config value for {name} is not finite"
            )));
        }
        let resources = ResourceRequest {
            gpus: req.gpus,
            memory: req.memory,
            dataset_id: req.dataset_id.clone(),
            image_id: req.image_id.clone(),
        };
        self.admit_or_reject(user, &resources)?;
        if let Some(team) = &req.team {
            if !self.state.user(user)?.teams.contains(team) {
                return Err(Error::PermissionDenied(format!(
                    "{user} is not in team {team}"
                )));
            }
        }
        let session_id = self.next_session_id(user, &req.dataset_id);
        let seed = req.seed.unwrap_or_else(|| self.fresh_seed(&session_id));
        let session = Session {
            session_id: session_id.clone(),
            owner: user.clone(),
            team: req.team,
            dataset_id: req.dataset_id,
            image_id: req.image_id,
            config: req.config,
            resources,
            profile: req.profile,
            state: SessionState::Queued,
            node_id: None,
            parent,
            seed,
            created_at: self.now(),
            started_at: None,
            finished_at: None,
            progress_step: start_step,
            start_step,
            attempt: 0,
            sweep,
            last_node: None,
            serving_checkpoint: None,
            history: Vec::new(),
        };
        self.emit(Event::SessionCreated {
            session: Box::new(session),
        })?;
        self.emit(Event::Enqueued {
            session_id: session_id.clone(),
            front: false,
        })?;
        Ok(session_id)
    }

    /// Stops a session; a running one is checkpointed first.
    pub fn stop(&mut self, user: &UserId, sid: &SessionId) -> Result<SessionState> {
        let session = self.mutable(user, sid)?;
        match session.state {
            SessionState::Queued => {
                self.emit(Event::Transitioned {
                    session_id: sid.clone(),
                    to: SessionState::Stopped,
                    reason: "stopped by user".into(),
                })?;
            }
            SessionState::Preparing | SessionState::Running | SessionState::Serving => {
                self.safe_stop(sid, "stopped by user", None)?;
            }
            _ => return Err(state_error(session, "stop")),
        }
        Ok(self.state.session(sid)?.state)
    }

    /// Deletes a terminal session's records. Submissions and lineage persist.
    pub fn rm(&mut self, user: &UserId, sid: &SessionId) -> Result<()> {
        let session = self.mutable(user, sid)?;
        if !session.state.is_terminal() {
            return Err(state_error(session, "rm"));
        }
        self.emit(Event::SessionRemoved {
            session_id: sid.clone(),
        })?;
        Ok(())
    }

    /// Requeues a Stopped or Failed session from its latest checkpoint.
    pub fn resume(&mut self, user: &UserId, sid: &SessionId) -> Result<SessionState> {
        let session = self.mutable(user, sid)?;
        if !matches!(session.state, SessionState::Stopped | SessionState::Failed) {
            return Err(state_error(session, "resume"));
        }
        let Some(ckpt) = self.state.latest_checkpoint(sid) else {
            return Err(Error::invalid(format!(
                "{sid} has no checkpoint to resume from"
            )));
        };
        let from_step = ckpt.step;
        let owner = session.owner.clone();
        self.admit_or_reject(&owner, &session.resources)?;
        self.emit(Event::Resumed {
            session_id: sid.clone(),
            from_step,
        })?;
        self.emit(Event::Enqueued {
            session_id: sid.clone(),
            front: false,
        })?;
        Ok(SessionState::Queued)
    }

    /// Starts a child session from the parent's latest checkpoint with the
    /// parent's config merged with `overrides`.
    pub fn fork(&mut self, user: &UserId, sid: &SessionId, req: ForkRequest) -> Result<SessionId> {
        let parent = self.viewable(user, sid)?;
        let ckpt = self.state.latest_checkpoint(sid);
        if ckpt.is_none() && !parent.state.is_terminal() {
            return Err(Error::invalid(format!(
                "{sid} is {:?} with no checkpoint; nothing to fork from",
                parent.state
            )));
        }
        let unknown: Vec<&String> = req
            .overrides
            .keys()
            .filter(|k| !parent.config.contains_key(*k))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::invalid(format!("unknown parameters: {unknown:?}")));
        }
        let mut config = parent.config.clone();
        config.extend(req.overrides);
        let run = RunRequest {
            dataset_id: parent.dataset_id.clone(),
            image_id: parent.image_id.clone(),
            config,
            gpus: parent.resources.gpus,
            memory: parent.resources.memory,
            profile: parent.profile.clone(),
            seed: req.seed,
            team: parent.team.clone().filter(|t| {
                self.state
                    .users
                    .get(user)
                    .is_some_and(|u| u.teams.contains(t))
            }),
        };
        let start_step = ckpt.map_or(0, |c| c.step);
        self.create_session(user, run, Some(sid.clone()), start_step, None)
    }

    /// Puts a Done session's checkpoint behind the inference API.
    pub fn serve(
        &mut self,
        user: &UserId,
        sid: &SessionId,
        checkpoint: Option<CheckpointId>,
    ) -> Result<Session> {
        let session = self.mutable(user, sid)?;
        if session.state != SessionState::Done {
            return Err(state_error(session, "serve"));
        }
        let ckpt = self.find_checkpoint(sid, checkpoint.as_ref())?.clone();
        let request = ResourceRequest {
            gpus: 0,
            ..session.resources.clone()
        };
        let nodes: Vec<_> = self.state.nodes.values().cloned().collect();
        let Some(node_id) = place(&request, &nodes) else {
            return Err(Error::Rejected(RejectReason::Infeasible));
        };
        self.emit(Event::ServingStarted {
            session_id: sid.clone(),
            checkpoint_id: ckpt.checkpoint_id,
            node_id,
            memory: request.memory,
        })?;
        Ok(self.state.session(sid)?.clone())
    }

    pub fn infer(
        &self,
        user: &UserId,
        sid: &SessionId,
        payload: &serde_json::Value,
    ) -> Result<InferenceOutput> {
        let session = self.viewable(user, sid)?;
        if session.state != SessionState::Serving {
            return Err(state_error(session, "infer"));
        }
        let ckpt = self.find_checkpoint(sid, session.serving_checkpoint.as_ref())?;
        Ok(evaluation::infer(&ckpt.digest, payload))
    }

    pub fn memo(&mut self, user: &UserId, sid: &SessionId, text: String) -> Result<Memo> {
        self.viewable(user, sid)?;
        let memo = Memo {
            at: self.now(),
            author: user.clone(),
            text,
        };
        self.emit(Event::MemoAdded {
            session_id: sid.clone(),
            memo: memo.clone(),
        })?;
        Ok(memo)
    }

    pub fn memos(&self, user: &UserId, sid: &SessionId) -> Result<Vec<Memo>> {
        self.viewable(user, sid)?;
        Ok(self.state.memos.get(sid).cloned().unwrap_or_default())
    }

    pub fn get_session(&self, user: &UserId, sid: &SessionId) -> Result<Session> {
        self.viewable(user, sid).cloned()
    }

    /// Sessions visible to `user`, oldest first.
    pub fn list_sessions(&self, user: &UserId, filter: &SessionFilter) -> Result<Vec<Session>> {
        let mut out = Vec::new();
        for s in self.state.sessions.values() {
            if filter.owner.as_ref().is_some_and(|o| o != &s.owner)
                || filter.state.is_some_and(|st| st != s.state)
                || filter.dataset.as_ref().is_some_and(|d| d != &s.dataset_id)
            {
                continue;
            }
            if self.can_view(user, s)? {
                out.push(s.clone());
            }
        }
        out.sort_by(|a, b| {
            a.created_at
                .cmp(&b.created_at)
                .then_with(|| a.session_id.cmp(&b.session_id))
        });
        Ok(out)
    }

    /// Metric events ordered by (step, name).
    pub fn events(
        &self,
        user: &UserId,
        sid: &SessionId,
        filter: &EventFilter,
    ) -> Result<Vec<MetricEvent>> {
        self.viewable(user, sid)?;
        let points = self
            .state
            .metrics
            .get(sid)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        Ok(points
            .iter()
            .filter(|p| filter.name.as_ref().is_none_or(|n| n == &p.name))
            .filter(|p| filter.from_step.is_none_or(|s| p.step >= s))
            .filter(|p| filter.to_step.is_none_or(|s| p.step <= s))
            .map(|p| MetricEvent {
                session_id: sid.clone(),
                step: p.step,
                name: p.name.clone(),
                value: p.value,
                timestamp: p.ts,
            })
            .collect())
    }

    pub fn eventlen(&self, user: &UserId, sid: &SessionId, filter: &EventFilter) -> Result<usize> {
        Ok(self.events(user, sid, filter)?.len())
    }

    /// Human-readable session log, derived from the event log in order.
    pub fn logs(&self, user: &UserId, sid: &SessionId) -> Result<Vec<LogLine>> {
        self.viewable(user, sid)?;
        let mut lines = Vec::new();
        for record in self.log.replay(1)? {
            if record.id != sid.as_str() && record.kind != "checkpoint" {
                continue;
            }
            let Ok(event) = serde_json::from_value::<Event>(record.payload) else {
                continue;
            };
            if let Some(line) = log_line(sid, &event) {
                lines.push(LogLine {
                    ts: record.ts,
                    line,
                });
            }
        }
        Ok(lines)
    }

    pub fn checkpoints(&self, user: &UserId, sid: &SessionId) -> Result<Vec<Checkpoint>> {
        self.viewable(user, sid)?;
        Ok(self.state.checkpoints.get(sid).cloned().unwrap_or_default())
    }

    fn find_checkpoint(&self, sid: &SessionId, id: Option<&CheckpointId>) -> Result<&Checkpoint> {
        let all = self
            .state
            .checkpoints
            .get(sid)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let found = match id {
            Some(id) => all.iter().find(|c| &c.checkpoint_id == id),
            None => all.last(),
        };
        found.ok_or_else(|| {
            Error::not_found(
                "checkpoint",
                id.map_or_else(|| format!("latest of {sid}"), |c| c.to_string()),
            )
        })
    }

    pub fn compare(&self, user: &UserId, sids: &[SessionId]) -> Result<Comparison> {
        if sids.len() < 2 {
            return Err(Error::invalid("compare needs at least two sessions"));
        }
        let mut configs = Vec::with_capacity(sids.len());
        for sid in sids {
            configs.push((sid.clone(), &self.viewable(user, sid)?.config));
        }
        Ok(compare::compare(&configs))
    }

    /// Scores a checkpoint against the dataset's hidden evaluation.
    pub fn submit(
        &mut self,
        user: &UserId,
        sid: &SessionId,
        checkpoint: Option<CheckpointId>,
    ) -> Result<Submission> {
        let session = self.mutable(user, sid)?;
        let dataset = self
            .state
            .datasets
            .get(&session.dataset_id)
            .ok_or_else(|| Error::not_found("dataset", &session.dataset_id))?;
        let evaluation = dataset.evaluation.clone().ok_or_else(|| {
            Error::invalid(format!(
                "dataset {} has no evaluation metric",
                dataset.dataset_id
            ))
        })?;
        let ckpt = self.find_checkpoint(sid, checkpoint.as_ref())?;
        let submission = Submission {
            submission_id: format!("sub-{}", self.state.next_submission + 1).into(),
            session_id: sid.clone(),
            owner: session.owner.clone(),
            dataset_id: session.dataset_id.clone(),
            checkpoint_id: ckpt.checkpoint_id.clone(),
            metric_name: evaluation.metric_name,
            order: evaluation.order,
            score: evaluation::score(&session.dataset_id, ckpt, evaluation.order),
            timestamp: self.now(),
        };
        self.emit(Event::SubmissionRecorded {
            submission: submission.clone(),
        })?;
        Ok(submission)
    }

    pub fn leaderboard(&self, user: &UserId, dataset: &DatasetId) -> Result<Leaderboard> {
        let ds = self.visible_dataset(user, dataset)?;
        let evaluation = ds
            .evaluation
            .clone()
            .ok_or_else(|| Error::invalid(format!("dataset {dataset} has no evaluation metric")))?;
        Ok(leaderboard::build(
            dataset,
            &evaluation.metric_name,
            evaluation.order,
            &self.state.submissions,
        ))
    }

    pub fn notifications_for(&self, user: &UserId) -> Vec<Notification> {
        self.state
            .notifications
            .iter()
            .filter(|n| &n.recipient == user)
            .cloned()
            .collect()
    }

    /// Checkpoints `sid` at `step` unless that exact checkpoint already exists.
    pub(crate) fn save_checkpoint(&mut self, sid: &SessionId, step: u64) -> Result<()> {
        if step == 0 {
            return Ok(());
        }
        let session = self.state.session(sid)?;
        let digest = checkpoint_digest(session.seed, &session.config, step);
        if self
            .state
            .latest_checkpoint(sid)
            .is_some_and(|c| c.step == step && c.digest == digest)
        {
            return Ok(());
        }
        let value = session.profile.clean_value(&session.config, step);
        self.push_checkpoint(sid, step, digest, value)
    }

    pub(crate) fn push_checkpoint(
        &mut self,
        sid: &SessionId,
        step: u64,
        digest: String,
        value: f64,
    ) -> Result<()> {
        let checkpoint = Checkpoint {
            checkpoint_id: format!("ckpt-{}", self.state.next_checkpoint + 1).into(),
            session_id: sid.clone(),
            step,
            digest,
            created_at: self.now(),
            value,
        };
        self.emit(Event::CheckpointSaved { checkpoint })?;
        Ok(())
    }

    /// Checkpoints a running session, releases its node and marks it Stopped.
    pub(crate) fn safe_stop(
        &mut self,
        sid: &SessionId,
        reason: &str,
        kind: Option<NotificationKind>,
    ) -> Result<()> {
        let session = self.state.session(sid)?;
        let node = session.node_id.clone();
        if session.state == SessionState::Running {
            let step = session.progress_step;
            self.save_checkpoint(sid, step)?;
        }
        self.end_session(sid, SessionState::Stopped, reason)?;
        if let Some(node_id) = node {
            self.directives.push(Directive::Stop {
                session_id: sid.clone(),
                node_id,
                epoch: self.state.epoch,
            });
        }
        if let Some(kind) = kind {
            self.notify(sid, kind, reason.to_owned())?;
        }
        Ok(())
    }

    pub(crate) fn notify(
        &mut self,
        sid: &SessionId,
        kind: NotificationKind,
        detail: String,
    ) -> Result<()> {
        let recipient = self.state.session(sid)?.owner.clone();
        self.emit(Event::NotificationIssued {
            notification: Notification {
                recipient,
                session_id: sid.clone(),
                kind,
                detail,
                timestamp: self.now(),
            },
        })?;
        Ok(())
    }
}

fn log_line(sid: &SessionId, event: &Event) -> Option<String> {
    Some(match event {
        Event::SessionCreated { session } => match &session.parent {
            Some(p) => format!("created from {p} at step {}", session.start_step),
            None => "created".to_owned(),
        },
        Event::Bound { node_id, gpus, .. } => format!("bound to {node_id} gpus {gpus:?}"),
        Event::Transitioned { to, reason, .. } => format!("state {to:?}: {reason}"),
        Event::StepCompleted { step, metrics, .. } => {
            let values: Vec<String> = metrics.iter().map(|(k, v)| format!("{k}={v:.6}")).collect();
            format!("step {step} {}", values.join(" "))
        }
        Event::CheckpointSaved { checkpoint } if &checkpoint.session_id == sid => format!(
            "checkpoint {} at step {}",
            checkpoint.checkpoint_id, checkpoint.step
        ),
        Event::Resumed { from_step, .. } => format!("resumed from step {from_step}"),
        Event::Reconfigured { config, source, .. } => {
            format!(
                "config replaced from {source}: {}",
                serde_json::to_string(config).ok()?
            )
        }
        Event::ServingStarted {
            checkpoint_id,
            node_id,
            ..
        } => format!("serving {checkpoint_id} on {node_id}"),
        Event::MemoAdded { memo, .. } => format!("memo by {}: {}", memo.author, memo.text),
        _ => return None,
    })
}
