//! Bringing a freshly promoted primary in line with what the nodes are
//! actually running, and filling in steps whose reports were never recorded.

use std::collections::BTreeSet;

use super::agent::{NodeStatus, TaskPhase};
use super::workload::StreamKey;
use crate::control::{ControlPlane, Directive};
use crate::domain::{Config, NotificationKind, SessionState};
use crate::error::Result;
use crate::event::Event;
use crate::ids::{NodeId, SessionId};
use crate::scheduler::{PrepareReport, TaskOutcome};

fn state_of(plane: &ControlPlane, sid: &SessionId, node: &NodeId) -> Option<SessionState> {
    plane
        .state()
        .sessions
        .get(sid)
        .filter(|s| s.node_id.as_ref() == Some(node))
        .map(|s| s.state)
}

/// Records every step up to `to_step` that the plane has not seen, using the
/// deterministic metric stream. Moves a Preparing session to Running first.
pub(crate) fn catch_up(
    plane: &mut ControlPlane,
    sid: &SessionId,
    node: &NodeId,
    to_step: u64,
    config: Option<&Config>,
) -> Result<()> {
    if state_of(plane, sid, node) == Some(SessionState::Preparing) {
        plane.on_prepared(sid, node, &PrepareReport::default())?;
    }
    if state_of(plane, sid, node) != Some(SessionState::Running) {
        return Ok(());
    }
    if let Some(config) = config {
        if &plane.state().session(sid)?.config != config {
            plane.emit(Event::Reconfigured {
                session_id: sid.clone(),
                config: config.clone(),
                source: sid.clone(),
            })?;
        }
    }
    let s = plane.state().session(sid)?.clone();
    let from = plane.state().last_metric_step(sid).max(s.start_step) + 1;
    for step in from..=to_step.min(s.profile.steps_total) {
        let key = StreamKey {
            seed: s.seed,
            dataset_id: &s.dataset_id,
            image_id: &s.image_id,
            config: &s.config,
        };
        let metrics = s.profile.step_metrics(&key, step);
        plane.on_step(sid, node, step, metrics)?;
    }
    Ok(())
}

/// Applies a node report after filling any gap before it.
pub(crate) fn report_step(
    plane: &mut ControlPlane,
    sid: &SessionId,
    node: &NodeId,
    step: u64,
    metrics: Vec<(String, f64)>,
) -> Result<()> {
    catch_up(plane, sid, node, step.saturating_sub(1), None)?;
    plane.on_step(sid, node, step, metrics)?;
    Ok(())
}

pub(crate) fn report_finished(
    plane: &mut ControlPlane,
    sid: &SessionId,
    node: &NodeId,
    outcome: TaskOutcome,
    last_step: u64,
) -> Result<()> {
    catch_up(plane, sid, node, last_step, None)?;
    plane.on_finished(sid, node, outcome)?;
    Ok(())
}

/// Last completed step implied by an outcome.
pub(crate) fn outcome_step(plane: &ControlPlane, sid: &SessionId, outcome: TaskOutcome) -> u64 {
    match outcome {
        TaskOutcome::Done => plane
            .state()
            .sessions
            .get(sid)
            .map_or(0, |s| s.profile.steps_total),
        TaskOutcome::Failed { step } | TaskOutcome::KilledOom { step } => step.saturating_sub(1),
    }
}

/// Reconciles one node's reported status with the plane's view.
pub(crate) fn reconcile_node(plane: &mut ControlPlane, status: &NodeStatus) -> Result<()> {
    let node = &status.node_id;
    if !plane.state().nodes.get(node).is_some_and(|n| n.is_alive()) {
        return Ok(());
    }
    let mut handled: BTreeSet<SessionId> = BTreeSet::new();
    let bound: Vec<(SessionId, SessionState, u32)> = plane
        .state()
        .sessions
        .values()
        .filter(|s| s.node_id.as_ref() == Some(node))
        .filter(|s| matches!(s.state, SessionState::Preparing | SessionState::Running))
        .map(|s| (s.session_id.clone(), s.state, s.attempt))
        .collect();
    for (sid, state, attempt) in bound {
        let task = status
            .tasks
            .iter()
            .find(|t| t.session_id == sid && t.attempt == attempt);
        let finished = status
            .finished
            .iter()
            .find(|f| f.session_id == sid && f.attempt == attempt);
        if let Some(t) = task {
            handled.insert(sid.clone());
            if t.phase != TaskPhase::Preparing {
                catch_up(plane, &sid, node, t.step, Some(&t.config))?;
            }
            if t.phase == TaskPhase::Barrier {
                plane.on_barrier(&sid, node, t.step)?;
            }
        } else if let Some(f) = finished {
            handled.insert(sid.clone());
            catch_up(plane, &sid, node, f.step, Some(&f.config))?;
            plane.on_finished(&sid, node, f.outcome)?;
        } else if state == SessionState::Preparing {
            plane.bind_failed(&sid)?;
        } else {
            plane.end_session(&sid, SessionState::Failed, "task lost during failover")?;
            plane.notify(
                &sid,
                NotificationKind::Failed,
                format!("task lost on {node} during failover"),
            )?;
        }
    }
    for t in &status.tasks {
        if handled.contains(&t.session_id) {
            continue;
        }
        if adopt(plane, node, &t.session_id, t.attempt, &t.gpus, t.memory)? {
            if t.phase != TaskPhase::Preparing {
                catch_up(plane, &t.session_id, node, t.step, Some(&t.config))?;
            }
            if t.phase == TaskPhase::Barrier {
                plane.on_barrier(&t.session_id, node, t.step)?;
            }
        } else {
            let epoch = plane.epoch();
            plane.directives.push(Directive::Stop {
                session_id: t.session_id.clone(),
                node_id: node.clone(),
                epoch,
            });
        }
    }
    for f in &status.finished {
        if handled.contains(&f.session_id) {
            continue;
        }
        let queued_same = plane
            .state()
            .sessions
            .get(&f.session_id)
            .is_some_and(|s| s.state == SessionState::Queued && s.attempt == f.attempt);
        if !queued_same {
            continue;
        }
        let (gpus, memory) = {
            let s = plane.state().session(&f.session_id)?;
            let node_desc = plane.state().node(node)?;
            let free = plane.state().free_gpu_indices(node_desc);
            (
                free.into_iter()
                    .take(s.resources.gpus as usize)
                    .collect::<Vec<_>>(),
                s.resources.memory,
            )
        };
        if adopt(plane, node, &f.session_id, f.attempt, &gpus, memory)? {
            catch_up(plane, &f.session_id, node, f.step, Some(&f.config))?;
            plane.on_finished(&f.session_id, node, f.outcome)?;
        }
    }
    Ok(())
}

/// Binds a queued session to the GPUs its task already occupies.
fn adopt(
    plane: &mut ControlPlane,
    node: &NodeId,
    sid: &SessionId,
    attempt: u32,
    gpus: &[u32],
    memory: u64,
) -> Result<bool> {
    let Some(s) = plane.state().sessions.get(sid) else {
        return Ok(false);
    };
    if s.state != SessionState::Queued
        || s.attempt != attempt
        || gpus.len() != s.resources.gpus as usize
        || memory != s.resources.memory
    {
        return Ok(false);
    }
    let desc = plane.state().node(node)?;
    let free: BTreeSet<u32> = plane.state().free_gpu_indices(desc).into_iter().collect();
    if !gpus.iter().all(|g| free.contains(g)) || desc.available_memory < memory {
        return Ok(false);
    }
    plane.emit(Event::Bound {
        session_id: sid.clone(),
        node_id: node.clone(),
        gpus: gpus.to_vec(),
        memory,
    })?;
    Ok(true)
}
