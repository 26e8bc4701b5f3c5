//! Value types shared by every part of the control plane.

mod config;
mod dataset;
mod node;
mod records;
mod session;
mod workload;

pub use config::{parse_assignment, Config, ConfigValue};
pub use dataset::{Dataset, Evaluation, Role, ScoreOrder, UserAccount, Visibility};
pub use node::{Liveness, NodeDescriptor, ResourceRequest};
pub use records::{
    Checkpoint, LogLine, Memo, MetricEvent, Notification, NotificationKind, Submission,
    TelemetrySample,
};
pub use session::{Session, SessionState, Transition};
pub use workload::{LearningCurve, ParamResponse, UtilizationSeries, WorkloadProfile};

pub const KIB: u64 = 1 << 10;
pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;
