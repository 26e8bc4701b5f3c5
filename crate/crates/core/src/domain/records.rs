use serde::{Deserialize, Serialize};

use super::ScoreOrder;
use crate::clock::Millis;
use crate::ids::{CheckpointId, DatasetId, NodeId, SessionId, SubmissionId, UserId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEvent {
    pub session_id: SessionId,
    pub step: u64,
    pub name: String,
    pub value: f64,
    pub timestamp: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub node_id: NodeId,
    pub gpu_index: u32,
    pub utilization_pct: f64,
    pub memory_used: u64,
    #[serde(default)]
    pub session_id: Option<SessionId>,
    pub timestamp: Millis,
}

impl TelemetrySample {
    pub fn validate(&self) -> crate::Result<()> {
        if !(0.0..=100.0).contains(&self.utilization_pct) {
            return Err(crate::Error::invalid(format!(
                "utilization {} outside 0..=100",
                self.utilization_pct
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub checkpoint_id: CheckpointId,
    pub session_id: SessionId,
    pub step: u64,
    /// Hex SHA-256 over (seed, config, step).
    pub digest: String,
    pub created_at: Millis,
    /// Noise-free value of the training metric at `step`.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub submission_id: SubmissionId,
    pub session_id: SessionId,
    pub owner: UserId,
    pub dataset_id: DatasetId,
    pub checkpoint_id: CheckpointId,
    pub metric_name: String,
    pub order: ScoreOrder,
    pub score: f64,
    pub timestamp: Millis,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NotificationKind {
    Failed,
    KilledOom,
    NodeDead,
    CreditStop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub recipient: UserId,
    pub session_id: SessionId,
    pub kind: NotificationKind,
    pub detail: String,
    pub timestamp: Millis,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Memo {
    pub at: Millis,
    pub author: UserId,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogLine {
    pub ts: Millis,
    pub line: String,
}
