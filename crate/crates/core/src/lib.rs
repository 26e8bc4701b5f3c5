//! Control plane for a small machine-learning cluster: event-sourced state,
//! a locality-aware defragmenting scheduler with warm-standby failover,
//! session lifecycle and sweeps, and a deterministic cluster simulator.

pub mod audit;
pub mod clock;
pub mod control;
pub mod domain;
pub mod error;
pub mod event;
pub mod ids;
pub mod log;
pub mod registry;
pub mod scheduler;
pub mod session;
pub mod sim;
pub mod state;

pub use control::{ControlPlane, Directive, PlaneConfig, TaskSpec};
pub use error::{Error, RejectReason, Result};
pub use event::Event;
pub use state::ControlState;
