use serde::{Deserialize, Serialize};

use super::{Config, ResourceRequest, WorkloadProfile};
use crate::clock::Millis;
use crate::ids::{CheckpointId, DatasetId, ImageId, NodeId, SessionId, SweepId, TeamId, UserId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SessionState {
    Queued,
    Preparing,
    Running,
    Done,
    Failed,
    Stopped,
    KilledOom,
    Serving,
}

impl SessionState {
    pub const ALL: [SessionState; 8] = [
        SessionState::Queued,
        SessionState::Preparing,
        SessionState::Running,
        SessionState::Done,
        SessionState::Failed,
        SessionState::Stopped,
        SessionState::KilledOom,
        SessionState::Serving,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            SessionState::Done
                | SessionState::Failed
                | SessionState::Stopped
                | SessionState::KilledOom
        )
    }

    /// States in which the session occupies a node.
    pub fn holds_node(self) -> bool {
        matches!(
            self,
            SessionState::Preparing | SessionState::Running | SessionState::Serving
        )
    }

    /// The lifecycle graph. Every observed transition must be one of these edges.
    pub fn can_transition(self, to: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, to),
            (Queued, Preparing)
                | (Queued, Stopped)
                | (Preparing, Running)
                | (Preparing, Queued)
                | (Preparing, Stopped)
                | (Preparing, Failed)
                | (Running, Done)
                | (Running, Failed)
                | (Running, Stopped)
                | (Running, KilledOom)
                | (Done, Serving)
                | (Serving, Stopped)
                | (Stopped, Queued)
                | (Failed, Queued)
        )
    }

    pub fn parse(raw: &str) -> Option<SessionState> {
        Self::ALL
            .into_iter()
            .find(|s| format!("{s:?}").eq_ignore_ascii_case(raw))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub at: Millis,
    pub from: SessionState,
    pub to: SessionState,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: SessionId,
    pub owner: UserId,
    pub team: Option<TeamId>,
    pub dataset_id: DatasetId,
    pub image_id: ImageId,
    pub config: Config,
    pub resources: ResourceRequest,
    pub profile: WorkloadProfile,
    pub state: SessionState,
    pub node_id: Option<NodeId>,
    pub parent: Option<SessionId>,
    pub seed: u64,
    pub created_at: Millis,
    pub started_at: Option<Millis>,
    pub finished_at: Option<Millis>,
    /// Last completed training step.
    pub progress_step: u64,
    /// Step the current attempt started from (warm start or resume).
    pub start_step: u64,
    pub attempt: u32,
    pub sweep: Option<SweepId>,
    pub last_node: Option<NodeId>,
    pub serving_checkpoint: Option<CheckpointId>,
    pub history: Vec<Transition>,
}

impl Session {
    pub fn validate(&self) -> crate::Result<()> {
        if self.node_id.is_some() != self.state.holds_node() {
            return Err(crate::Error::Invariant(format!(
                "session {} in {:?} with node {:?}",
                self.session_id, self.state, self.node_id
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use SessionState::*;

    #[test]
    fn terminal_states() {
        let terminal: Vec<_> = SessionState::ALL
            .into_iter()
            .filter(|s| s.is_terminal())
            .collect();
        assert_eq!(terminal, vec![Done, Failed, Stopped, KilledOom]);
    }

    #[test]
    fn serving_is_entered_only_from_done() {
        for from in SessionState::ALL {
            assert_eq!(from.can_transition(Serving), from == Done, "{from:?}");
        }
    }

    #[test]
    fn nothing_leaves_killed_oom() {
        for to in SessionState::ALL {
            assert!(!KilledOom.can_transition(to));
        }
    }

    #[test]
    fn parse_is_case_insensitive() {
        assert_eq!(SessionState::parse("running"), Some(Running));
        assert_eq!(SessionState::parse("KilledOom"), Some(KilledOom));
        assert_eq!(SessionState::parse("bogus"), None);
    }
}
