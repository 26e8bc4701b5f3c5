//! State-changing events. Every mutation of the control plane is one of these,
//! appended to the log and then folded into [`ControlState`](crate::state::ControlState).

use serde::{Deserialize, Serialize};

use crate::domain::{
    Checkpoint, Config, Dataset, Memo, NodeDescriptor, Notification, Role, Session, SessionState,
    Submission, UserAccount,
};
use crate::ids::{DatasetId, ImageId, NodeId, SessionId, SweepId, TeamId, UserId};
use crate::session::sweep::{PbtGeneration, Sweep};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    EpochStarted {
        epoch: u64,
        replica: String,
    },
    NodeRegistered {
        node: NodeDescriptor,
    },
    NodeDied {
        node_id: NodeId,
    },
    DatasetCached {
        node_id: NodeId,
        dataset_id: DatasetId,
    },
    DatasetEvicted {
        node_id: NodeId,
        dataset_id: DatasetId,
    },
    ImageCached {
        node_id: NodeId,
        image_id: ImageId,
    },
    DatasetPushed {
        dataset: Dataset,
    },
    DatasetAccessed {
        dataset_id: DatasetId,
    },
    UserCreated {
        account: UserAccount,
    },
    CreditSet {
        user_id: UserId,
        balance: u64,
    },
    RoleSet {
        user_id: UserId,
        role: Role,
    },
    TeamJoined {
        user_id: UserId,
        team: TeamId,
    },
    TeamLeft {
        user_id: UserId,
        team: TeamId,
    },
    /// Usage metered since the last charge, and the credits it cost.
    CreditCharged {
        user_id: UserId,
        gpu_ms: u64,
        credits: u64,
    },
    /// Usage up to `until` has been metered.
    Metered {
        until: crate::clock::Millis,
    },
    SessionCreated {
        session: Box<Session>,
    },
    Enqueued {
        session_id: SessionId,
        front: bool,
    },
    /// Removes the ticket from the queue, reserves resources and enters Preparing.
    Bound {
        session_id: SessionId,
        node_id: NodeId,
        gpus: Vec<u32>,
        memory: u64,
    },
    /// Returns reserved resources; the state change follows separately.
    Released {
        session_id: SessionId,
    },
    Transitioned {
        session_id: SessionId,
        to: SessionState,
        reason: String,
    },
    StepCompleted {
        session_id: SessionId,
        step: u64,
        metrics: Vec<(String, f64)>,
    },
    CheckpointSaved {
        checkpoint: Checkpoint,
    },
    Resumed {
        session_id: SessionId,
        from_step: u64,
    },
    /// Replaces the config mid-run (population-based exploit/explore).
    Reconfigured {
        session_id: SessionId,
        config: Config,
        source: SessionId,
    },
    ServingStarted {
        session_id: SessionId,
        checkpoint_id: crate::ids::CheckpointId,
        node_id: NodeId,
        memory: u64,
    },
    SessionRemoved {
        session_id: SessionId,
    },
    MemoAdded {
        session_id: SessionId,
        memo: Memo,
    },
    SubmissionRecorded {
        submission: Submission,
    },
    NotificationIssued {
        notification: Notification,
    },
    SweepCreated {
        sweep: Box<Sweep>,
    },
    SweepMemberAdded {
        sweep_id: SweepId,
        session_id: SessionId,
    },
    SweepSpawnRejected {
        sweep_id: SweepId,
    },
    PbtGenerationCompleted {
        sweep_id: SweepId,
        generation: PbtGeneration,
    },
}

impl Event {
    /// `(entity kind, entity id)` recorded alongside the payload in the log.
    pub fn entity(&self) -> (&'static str, String) {
        use Event::*;
        match self {
            EpochStarted { epoch, .. } => ("scheduler", epoch.to_string()),
            Metered { until } => ("scheduler", until.to_string()),
            NodeRegistered { node } => ("node", node.node_id.to_string()),
            NodeDied { node_id }
            | DatasetCached { node_id, .. }
            | DatasetEvicted { node_id, .. }
            | ImageCached { node_id, .. } => ("node", node_id.to_string()),
            DatasetPushed { dataset } => ("dataset", dataset.dataset_id.to_string()),
            DatasetAccessed { dataset_id } => ("dataset", dataset_id.to_string()),
            UserCreated { account } => ("user", account.user_id.to_string()),
            CreditSet { user_id, .. }
            | RoleSet { user_id, .. }
            | TeamJoined { user_id, .. }
            | TeamLeft { user_id, .. }
            | CreditCharged { user_id, .. } => ("user", user_id.to_string()),
            SessionCreated { session } => ("session", session.session_id.to_string()),
            Enqueued { session_id, .. }
            | Bound { session_id, .. }
            | Released { session_id }
            | Transitioned { session_id, .. }
            | StepCompleted { session_id, .. }
            | Resumed { session_id, .. }
            | Reconfigured { session_id, .. }
            | ServingStarted { session_id, .. }
            | SessionRemoved { session_id }
            | MemoAdded { session_id, .. } => ("session", session_id.to_string()),
            CheckpointSaved { checkpoint } => ("checkpoint", checkpoint.checkpoint_id.to_string()),
            SubmissionRecorded { submission } => {
                ("submission", submission.submission_id.to_string())
            }
            NotificationIssued { notification } => {
                ("notification", notification.session_id.to_string())
            }
            SweepCreated { sweep } => ("sweep", sweep.sweep_id.to_string()),
            SweepMemberAdded { sweep_id, .. }
            | SweepSpawnRejected { sweep_id }
            | PbtGenerationCompleted { sweep_id, .. } => ("sweep", sweep_id.to_string()),
        }
    }
}
