//! Simulated node agent: physical GPU/memory accounting, dataset and image
//! caches, task stepping and epoch fencing.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::control::TaskSpec;
use crate::domain::{Config, TelemetrySample};
use crate::ids::{DatasetId, ImageId, NodeId, SessionId};
use crate::scheduler::{PrepareReport, TaskOutcome};

use super::workload::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskPhase {
    Preparing,
    Running,
    Barrier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStatus {
    pub session_id: SessionId,
    pub attempt: u32,
    pub epoch: u64,
    pub gpus: Vec<u32>,
    pub memory: u64,
    pub config: Config,
    pub phase: TaskPhase,
    /// Last completed step.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinishedTask {
    pub session_id: SessionId,
    pub attempt: u32,
    pub outcome: TaskOutcome,
    /// Last step that completed and was reported.
    pub step: u64,
    pub config: Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStatus {
    pub node_id: NodeId,
    pub epoch: u64,
    pub tasks: Vec<TaskStatus>,
    pub finished: Vec<FinishedTask>,
}

/// What a node tells the schedulers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeReport {
    Heartbeat {
        node_id: NodeId,
    },
    BindFailed {
        session_id: SessionId,
        node_id: NodeId,
    },
    Prepared {
        session_id: SessionId,
        node_id: NodeId,
        report: PrepareReport,
    },
    Step {
        session_id: SessionId,
        node_id: NodeId,
        step: u64,
        metrics: Vec<(String, f64)>,
    },
    Barrier {
        session_id: SessionId,
        node_id: NodeId,
        step: u64,
    },
    Finished {
        session_id: SessionId,
        node_id: NodeId,
        outcome: TaskOutcome,
    },
    Status(NodeStatus),
}

#[derive(Debug, Clone)]
pub(crate) struct Task {
    pub spec: TaskSpec,
    pub phase: TaskPhase,
    pub step: u64,
    /// Invalidates timer events scheduled for an earlier incarnation.
    pub token: u64,
}

/// Result of handling a timer for a task.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum StepResult {
    /// Schedule the next step after `delay`.
    Continue {
        reports: Vec<NodeReport>,
        delay: Millis,
    },
    /// The task paused or ended; nothing further to schedule.
    Idle { reports: Vec<NodeReport> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferStats {
    pub dataset_copies: u64,
    pub dataset_copy_ms: Millis,
    pub image_pulls: u64,
    pub image_pull_ms: Millis,
}

#[derive(Debug, Clone)]
pub struct NodeAgent {
    pub node_id: NodeId,
    pub total_gpus: u32,
    pub total_memory: u64,
    pub alive: bool,
    /// Highest scheduler epoch seen; older commands are fenced.
    pub max_epoch: u64,
    pub(crate) tasks: BTreeMap<SessionId, Task>,
    pub(crate) finished: BTreeMap<SessionId, FinishedTask>,
    /// Cached dataset -> (size, last access).
    cache: BTreeMap<DatasetId, (u64, Millis)>,
    images: BTreeSet<ImageId>,
    pub fenced: u64,
    next_token: u64,
}

impl NodeAgent {
    pub fn new(node_id: NodeId, total_gpus: u32, total_memory: u64) -> Self {
        Self {
            node_id,
            total_gpus,
            total_memory,
            alive: true,
            max_epoch: 0,
            tasks: BTreeMap::new(),
            finished: BTreeMap::new(),
            cache: BTreeMap::new(),
            images: BTreeSet::new(),
            fenced: 0,
            next_token: 0,
        }
    }

    pub fn cached_datasets(&self) -> BTreeSet<DatasetId> {
        self.cache.keys().cloned().collect()
    }

    fn used(&self) -> (BTreeSet<u32>, u64) {
        let mut gpus = BTreeSet::new();
        let mut mem = 0;
        for t in self.tasks.values() {
            gpus.extend(t.spec.gpus.iter().copied());
            mem += t.spec.memory;
        }
        (gpus, mem)
    }

    /// Accepts or fences a command from `epoch`.
    pub fn observe_epoch(&mut self, epoch: u64) -> bool {
        if epoch < self.max_epoch {
            self.fenced += 1;
            return false;
        }
        self.max_epoch = epoch;
        true
    }

    /// Starts preparing a task. Returns the preparation delay and transfer
    /// accounting, or `None` if the node cannot physically host it.
    pub(crate) fn start(
        &mut self,
        spec: TaskSpec,
        now: Millis,
        bandwidth: u64,
        image_pull_time: Millis,
        cache_enabled: bool,
        stats: &mut TransferStats,
    ) -> Option<(u64, Millis)> {
        if self.tasks.contains_key(&spec.session_id) {
            return None;
        }
        let (used_gpus, used_mem) = self.used();
        let gpus_ok = spec
            .gpus
            .iter()
            .all(|g| *g < self.total_gpus && !used_gpus.contains(g));
        if !gpus_ok || used_mem + spec.memory > self.total_memory {
            return None;
        }
        let mut delay = 0;
        let dataset_cached = cache_enabled && self.cache.contains_key(&spec.dataset_id);
        if !dataset_cached {
            let ms =
                (spec.dataset_size as u128 * 1000).div_ceil(bandwidth.max(1) as u128) as Millis;
            stats.dataset_copies += 1;
            stats.dataset_copy_ms += ms;
            delay += ms;
        }
        if !(cache_enabled && self.images.contains(&spec.image_id)) {
            stats.image_pulls += 1;
            stats.image_pull_ms += image_pull_time;
            delay += image_pull_time;
        }
        if let Some(entry) = self.cache.get_mut(&spec.dataset_id) {
            entry.1 = now;
        }
        self.next_token += 1;
        let token = self.next_token;
        self.finished.remove(&spec.session_id);
        self.tasks.insert(
            spec.session_id.clone(),
            Task {
                step: spec.start_step,
                spec,
                phase: TaskPhase::Preparing,
                token,
            },
        );
        Some((token, delay))
    }

    /// Environment ready: update caches and begin stepping.
    pub(crate) fn prepared(
        &mut self,
        sid: &SessionId,
        token: u64,
        now: Millis,
        cache_enabled: bool,
        cache_capacity: Option<u64>,
    ) -> Option<StepResult> {
        let task = self.tasks.get(sid).filter(|t| t.token == token)?;
        let spec = task.spec.clone();
        let mut report = PrepareReport::default();
        if cache_enabled {
            if !self.cache.contains_key(&spec.dataset_id) {
                report.dataset_copied = true;
                if let Some(cap) = cache_capacity {
                    report.evicted = self.evict_for(spec.dataset_size, cap, &spec.dataset_id);
                }
            }
            self.cache
                .insert(spec.dataset_id.clone(), (spec.dataset_size, now));
            report.image_pulled = self.images.insert(spec.image_id.clone());
        } else {
            report.dataset_copied = true;
            report.image_pulled = true;
        }
        let task = self.tasks.get_mut(sid).expect("checked above");
        task.phase = TaskPhase::Running;
        let mut reports = vec![NodeReport::Prepared {
            session_id: sid.clone(),
            node_id: self.node_id.clone(),
            report,
        }];
        if spec.start_step >= spec.profile.steps_total {
            reports.extend(self.finish(sid, TaskOutcome::Done));
            return Some(StepResult::Idle { reports });
        }
        Some(StepResult::Continue {
            reports,
            delay: spec.profile.step_duration,
        })
    }

    fn evict_for(&mut self, incoming: u64, capacity: u64, keep: &DatasetId) -> Vec<DatasetId> {
        let mut evicted = Vec::new();
        let mut used: u64 = self.cache.values().map(|(s, _)| s).sum();
        while used + incoming > capacity {
            let victim = self
                .cache
                .iter()
                .filter(|(id, _)| *id != keep)
                .min_by(|a, b| a.1 .1.cmp(&b.1 .1).then(a.0.cmp(b.0)))
                .map(|(id, (size, _))| (id.clone(), *size));
            let Some((id, size)) = victim else { break };
            self.cache.remove(&id);
            used -= size;
            evicted.push(id);
        }
        evicted
    }

    /// Completes the next training step of a running task.
    pub(crate) fn step(&mut self, sid: &SessionId, token: u64) -> Option<StepResult> {
        let task = self
            .tasks
            .get(sid)
            .filter(|t| t.token == token && t.phase == TaskPhase::Running)?;
        let spec = &task.spec;
        let step = task.step + 1;
        let profile = &spec.profile;
        if spec.attempt == 0 && profile.failure_at == Some(step) {
            let reports = self.finish(sid, TaskOutcome::Failed { step });
            return Some(StepResult::Idle { reports });
        }
        if profile.memory_at(step) > spec.memory {
            let reports = self.finish(sid, TaskOutcome::KilledOom { step });
            return Some(StepResult::Idle { reports });
        }
        let mut reports = Vec::new();
        if step > spec.recorded_until {
            let key = StreamKey {
                seed: spec.seed,
                dataset_id: &spec.dataset_id,
                image_id: &spec.image_id,
                config: &spec.config,
            };
            reports.push(NodeReport::Step {
                session_id: sid.clone(),
                node_id: self.node_id.clone(),
                step,
                metrics: profile.step_metrics(&key, step),
            });
        }
        let at_barrier = spec
            .barrier_interval
            .is_some_and(|i| i > 0 && step % i == 0 && step < profile.steps_total);
        let delay = profile.step_duration;
        let done = step >= profile.steps_total;
        let task = self.tasks.get_mut(sid).expect("checked above");
        task.step = step;
        if done {
            reports.extend(self.finish(sid, TaskOutcome::Done));
            return Some(StepResult::Idle { reports });
        }
        if at_barrier {
            task.phase = TaskPhase::Barrier;
            reports.push(NodeReport::Barrier {
                session_id: sid.clone(),
                node_id: self.node_id.clone(),
                step,
            });
            return Some(StepResult::Idle { reports });
        }
        Some(StepResult::Continue { reports, delay })
    }

    /// Leaves a barrier, optionally with a new config. Returns the new timer token.
    pub(crate) fn resume_from_barrier(
        &mut self,
        sid: &SessionId,
        config: Option<Config>,
    ) -> Option<(u64, Millis)> {
        let task = self
            .tasks
            .get_mut(sid)
            .filter(|t| t.phase == TaskPhase::Barrier)?;
        if let Some(config) = config {
            task.spec.config = config;
        }
        task.phase = TaskPhase::Running;
        self.next_token += 1;
        task.token = self.next_token;
        Some((task.token, task.spec.profile.step_duration))
    }

    fn finish(&mut self, sid: &SessionId, outcome: TaskOutcome) -> Vec<NodeReport> {
        let Some(task) = self.tasks.remove(sid) else {
            return Vec::new();
        };
        let step = match outcome {
            TaskOutcome::Done => task.step,
            TaskOutcome::Failed { step } | TaskOutcome::KilledOom { step } => step - 1,
        };
        self.finished.insert(
            sid.clone(),
            FinishedTask {
                session_id: sid.clone(),
                attempt: task.spec.attempt,
                outcome,
                step,
                config: task.spec.config,
            },
        );
        vec![NodeReport::Finished {
            session_id: sid.clone(),
            node_id: self.node_id.clone(),
            outcome,
        }]
    }

    /// Kills a task without reporting (the scheduler asked for it).
    pub(crate) fn stop(&mut self, sid: &SessionId) -> bool {
        self.tasks.remove(sid).is_some()
    }

    pub fn crash(&mut self) {
        self.alive = false;
        self.tasks.clear();
    }

    pub fn status(&self) -> NodeStatus {
        NodeStatus {
            node_id: self.node_id.clone(),
            epoch: self.max_epoch,
            tasks: self
                .tasks
                .values()
                .map(|t| TaskStatus {
                    session_id: t.spec.session_id.clone(),
                    attempt: t.spec.attempt,
                    epoch: t.spec.epoch,
                    gpus: t.spec.gpus.clone(),
                    memory: t.spec.memory,
                    config: t.spec.config.clone(),
                    phase: t.phase,
                    step: t.step,
                })
                .collect(),
            finished: self.finished.values().cloned().collect(),
        }
    }

    /// One sample per GPU at `now`.
    pub fn sample(&self, now: Millis) -> Vec<TelemetrySample> {
        let mut owner: BTreeMap<u32, &Task> = BTreeMap::new();
        for t in self.tasks.values() {
            for g in &t.spec.gpus {
                owner.insert(*g, t);
            }
        }
        (0..self.total_gpus)
            .map(|g| {
                let (util, mem, sid) = match owner.get(&g) {
                    Some(t) => {
                        let n = t.spec.gpus.len().max(1) as u64;
                        let util = match t.phase {
                            TaskPhase::Running => t.spec.profile.gpu_utilization.at(t.step + 1),
                            _ => 0.0,
                        };
                        let mem = match t.phase {
                            TaskPhase::Preparing => 0,
                            _ => t.spec.profile.memory_at(t.step.max(1)) / n,
                        };
                        (util, mem, Some(t.spec.session_id.clone()))
                    }
                    None => (0.0, 0, None),
                };
                TelemetrySample {
                    node_id: self.node_id.clone(),
                    gpu_index: g,
                    utilization_pct: util.clamp(0.0, 100.0),
                    memory_used: mem,
                    session_id: sid,
                    timestamp: now,
                }
            })
            .collect()
    }
}
