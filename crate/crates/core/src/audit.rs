//! Post-hoc audit of an event log: replays every record and checks resource
//! conservation, oversubscription and lifecycle edges at each sequence point.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::SessionState;
use crate::error::{Error, Result};
use crate::event::Event;
use crate::ids::NodeId;
use crate::log::LogRecord;
use crate::state::ControlState;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub records: u64,
    pub transitions: BTreeMap<String, u64>,
    /// Highest number of GPUs bound at once, per node.
    pub peak_bound_gpus: BTreeMap<NodeId, u32>,
}

fn check_resources(state: &ControlState, seq: u64) -> Result<BTreeMap<NodeId, u32>> {
    let mut bound: BTreeMap<&NodeId, (u64, u64)> = BTreeMap::new();
    for b in state.bindings.values() {
        let e = bound.entry(&b.node_id).or_default();
        e.0 += b.gpus.len() as u64;
        e.1 += b.memory;
    }
    let mut out = BTreeMap::new();
    for (node_id, node) in &state.nodes {
        let (gpus, mem) = bound.get(node_id).copied().unwrap_or_default();
        if gpus > node.total_gpus as u64 || mem > node.total_memory {
            return Err(Error::Invariant(format!(
                "seq {seq}: {node_id} oversubscribed ({gpus} GPUs, {mem} bytes)"
            )));
        }
        if gpus + node.available_gpus as u64 != node.total_gpus as u64
            || mem + node.available_memory != node.total_memory
        {
            return Err(Error::Invariant(format!(
                "seq {seq}: {node_id} accounting drift"
            )));
        }
        if gpus > 0 {
            out.insert(node_id.clone(), gpus as u32);
        }
    }
    Ok(out)
}

/// Replays `records` from an empty state, failing at the first violation.
pub fn audit_log(records: &[LogRecord]) -> Result<AuditReport> {
    let mut state = ControlState::default();
    let mut report = AuditReport::default();
    for r in records {
        let event: Event = serde_json::from_value(r.payload.clone())
            .map_err(|e| Error::Invariant(format!("seq {}: undecodable payload: {e}", r.seq)))?;
        let before = match &event {
            Event::Transitioned { session_id, .. }
            | Event::Bound { session_id, .. }
            | Event::Resumed { session_id, .. }
            | Event::ServingStarted { session_id, .. } => {
                state.sessions.get(session_id).map(|s| s.state)
            }
            _ => None,
        };
        state.apply_record(r)?;
        if let Some(from) = before {
            let sid = match &event {
                Event::Transitioned { session_id, .. }
                | Event::Bound { session_id, .. }
                | Event::Resumed { session_id, .. }
                | Event::ServingStarted { session_id, .. } => session_id,
                _ => unreachable!(),
            };
            let session = state.session(sid)?;
            let to = session.state;
            if from != to && !from.can_transition(to) {
                return Err(Error::Invariant(format!(
                    "seq {}: illegal edge {from:?} -> {to:?} for {sid}",
                    r.seq
                )));
            }
            session.validate()?;
            *report
                .transitions
                .entry(format!("{from:?}->{to:?}"))
                .or_default() += 1;
        }
        for (node, gpus) in check_resources(&state, r.seq)? {
            let peak = report.peak_bound_gpus.entry(node).or_default();
            *peak = (*peak).max(gpus);
        }
        report.records += 1;
    }
    state.check_invariants()?;
    for s in state.sessions.values() {
        if s.state == SessionState::Serving && s.serving_checkpoint.is_none() {
            return Err(Error::Invariant(format!(
                "{} serving without a checkpoint",
                s.session_id
            )));
        }
    }
    Ok(report)
}
