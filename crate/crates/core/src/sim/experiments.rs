//! Seeded, scripted experiments over the simulator: defragmentation,
//! dataset locality, failover drills and a utilization fleet.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fixtures::{self, ALICE, BOB};
use super::{FaultKind, FaultTarget, SimConfig, Simulation, UtilizationSummary};
use crate::clock::{Millis, SECOND};
use crate::domain::{SessionState, UtilizationSeries, Visibility, GIB};
use crate::error::{Error, Result};
use crate::ids::{DatasetId, NodeId, SessionId};
use crate::log::LogRecord;
use crate::registry::DatasetPush;
use crate::scheduler::PlacementPolicy;
use crate::state::ControlState;

/// Virtual time within `[from, to)` during which at least one live node had
/// every GPU free.
pub fn fully_free_time(records: &[LogRecord], from: Millis, to: Millis) -> Result<Millis> {
    let mut state = ControlState::default();
    let mut total = 0;
    let mut since: Option<Millis> = None;
    let any_free = |s: &ControlState| {
        s.nodes
            .values()
            .any(|n| n.is_alive() && n.total_gpus > 0 && n.available_gpus == n.total_gpus)
    };
    let clip = |a: Millis, b: Millis| b.min(to).saturating_sub(a.max(from));
    for r in records {
        state.apply_record(r)?;
        match (since, any_free(&state)) {
            (None, true) => since = Some(r.ts),
            (Some(start), false) => {
                total += clip(start, r.ts);
                since = None;
            }
            _ => {}
        }
    }
    if let Some(start) = since {
        total += clip(start, to);
    }
    Ok(total)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceJob {
    pub at: Millis,
    pub gpus: u32,
    pub steps: u64,
    pub dataset: DatasetId,
}

/// Mixed 1/2/8-GPU arrivals on a 4x8 fleet.
pub fn defrag_trace(seed: u64) -> Vec<TraceJob> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at = 0;
    (0..24)
        .map(|_| {
            at += rng.gen_range(1..=4) * SECOND;
            let roll: f64 = rng.gen();
            let gpus = if roll < 0.5 {
                1
            } else if roll < 0.85 {
                2
            } else {
                8
            };
            TraceJob {
                at,
                gpus,
                steps: rng.gen_range(10..=40),
                dataset: fixtures::MNIST.into(),
            }
        })
        .collect()
}

/// Replays a trace and returns the primary's log.
pub fn run_trace(
    config: SimConfig,
    nodes: usize,
    gpus: u32,
    trace: &[TraceJob],
    extra_datasets: &[(DatasetId, u64)],
) -> Result<Simulation> {
    let mut sim = fixtures::cluster(config, nodes, gpus, 64 * GIB)?;
    for (id, size) in extra_datasets {
        let push = DatasetPush {
            dataset_id: id.clone(),
            size: *size,
            visibility: Visibility::Public,
            evaluation: None,
            path: None,
        };
        sim.command(|p| p.push_dataset(&fixtures::user(ALICE), push))?;
    }
    let mut sorted: Vec<&TraceJob> = trace.iter().collect();
    sorted.sort_by_key(|j| j.at);
    for job in sorted {
        sim.run_until(job.at.max(sim.now()))?;
        let req = fixtures::request(
            job.dataset.as_str(),
            job.gpus,
            4 * GIB,
            fixtures::profile(job.steps),
        );
        sim.command(|p| p.run(&fixtures::user(BOB), req))?;
    }
    if !sim.run_until_idle(sim.now() + 3_600 * SECOND)? {
        return Err(Error::Invariant("trace did not drain".into()));
    }
    Ok(sim)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefragOutcome {
    pub policy_free_ms: Millis,
    pub random_free_ms: Millis,
}

impl DefragOutcome {
    pub fn policy_wins(&self) -> bool {
        self.policy_free_ms > self.random_free_ms
    }
}

/// Fully-free-node time over the arrival window under both placement rules.
pub fn defrag_trial(seed: u64) -> Result<DefragOutcome> {
    let trace = defrag_trace(seed);
    let horizon = trace.iter().map(|j| j.at).max().unwrap_or(0);
    let measure = |policy| -> Result<Millis> {
        let mut config = SimConfig {
            standby: false,
            telemetry: false,
            ..SimConfig::default()
        };
        config.plane.placement = policy;
        config.plane.placement_seed = seed;
        let sim = run_trace(config, 4, 8, &trace, &[])?;
        sim.audit()?;
        fully_free_time(&sim.primary()?.log().replay(1)?, 0, horizon)
    };
    Ok(DefragOutcome {
        policy_free_ms: measure(PlacementPolicy::DefragLocality)?,
        random_free_ms: measure(PlacementPolicy::RandomFeasible)?,
    })
}

/// Twenty jobs over three datasets on four nodes, arriving in waves.
pub fn locality_trace(seed: u64) -> (Vec<TraceJob>, Vec<(DatasetId, u64)>) {
    let datasets: Vec<(DatasetId, u64)> = vec![
        ("imagenet-mini".into(), 8 * GIB),
        ("coco-mini".into(), 4 * GIB),
        (fixtures::MNIST.into(), GIB),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at = 0;
    let jobs = (0..20)
        .map(|_| {
            at += rng.gen_range(2..=10) * SECOND;
            TraceJob {
                at,
                gpus: [1, 2, 4][rng.gen_range(0..3)],
                steps: rng.gen_range(10..=30),
                dataset: datasets[rng.gen_range(0..datasets.len())].0.clone(),
            }
        })
        .collect();
    // mnist is pushed by the fixture.
    (jobs, datasets[..2].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalityOutcome {
    pub cached_copy_ms: Millis,
    pub uncached_copy_ms: Millis,
}

impl LocalityOutcome {
    pub fn reduction(&self) -> f64 {
        if self.uncached_copy_ms == 0 {
            return 0.0;
        }
        1.0 - self.cached_copy_ms as f64 / self.uncached_copy_ms as f64
    }
}

pub fn locality_trial(seed: u64) -> Result<LocalityOutcome> {
    let (trace, datasets) = locality_trace(seed);
    let measure = |cache: bool| -> Result<Millis> {
        let mut config = SimConfig {
            standby: false,
            telemetry: false,
            ..SimConfig::default()
        };
        config.plane.cache_enabled = cache;
        let sim = run_trace(config, 4, 8, &trace, &datasets)?;
        sim.audit()?;
        Ok(sim.stats().transfers.dataset_copy_ms)
    };
    Ok(LocalityOutcome {
        cached_copy_ms: measure(true)?,
        uncached_copy_ms: measure(false)?,
    })
}

/// What one failover drill observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailoverOutcome {
    pub crash_at: Millis,
    pub promoted_at: Option<Millis>,
    pub promotions: usize,
    /// The promoted table equals the state rebuilt from the deposed
    /// primary's own log prefix up to the replicated watermark.
    pub table_matches: bool,
    pub all_done: bool,
    pub split_brain: u64,
    pub one_leader_per_epoch: bool,
    pub audit_ok: bool,
    pub failover_timeout: Millis,
}

impl FailoverOutcome {
    pub fn passed(&self) -> bool {
        self.promotions == 1
            && self
                .promoted_at
                .is_some_and(|t| t > self.crash_at && t - self.crash_at <= self.failover_timeout)
            && self.table_matches
            && self.all_done
            && self.split_brain == 0
            && self.one_leader_per_epoch
            && self.audit_ok
    }
}

/// Crashes the primary mid-trace under injected message delays shorter than
/// the detection slack, then checks promotion, state and completion.
pub fn failover_trial(seed: u64) -> Result<FailoverOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_fa11);
    let config = SimConfig::default();
    let slack = config.failover_timeout - config.heartbeat_interval;
    let mut trace = defrag_trace(seed);
    for job in &mut trace {
        job.gpus = job.gpus.min(4);
    }
    let last_arrival = trace.iter().map(|j| j.at).max().unwrap_or(0);
    let crash_at = rng.gen_range(5 * SECOND..last_arrival + 20 * SECOND);
    let mut sim = fixtures::cluster(config.clone(), 4, 8, 64 * GIB)?;
    sim.inject_fault(crash_at, FaultTarget::Primary, FaultKind::Crash);
    for _ in 0..3 {
        let target = match rng.gen_range(0..3) {
            0 => FaultTarget::Replica(0),
            1 => FaultTarget::Replica(1),
            _ => FaultTarget::Node(NodeId::new(format!("node-{}", rng.gen_range(1..=4)))),
        };
        let duration = rng.gen_range(100..slack);
        let at = rng.gen_range(2 * SECOND..last_arrival + 30 * SECOND);
        sim.inject_fault(at, target, FaultKind::NetworkDelay { duration });
    }
    let mut sessions: Vec<SessionId> = Vec::new();
    for job in &trace {
        sim.run_until(job.at.max(sim.now()))?;
        let req = fixtures::request(
            job.dataset.as_str(),
            job.gpus,
            4 * GIB,
            fixtures::profile(job.steps),
        );
        // A submission can land while no replica is primary; retry each tick.
        loop {
            match sim.command(|p| p.run(&fixtures::user(BOB), req.clone())) {
                Ok(sid) => {
                    sessions.push(sid);
                    break;
                }
                Err(Error::NotPrimary { .. }) => {
                    let next = sim.now() + config.tick_interval;
                    sim.run_until(next)?;
                }
                Err(e) => return Err(e),
            }
        }
    }
    sim.run_until(sim.now().max(crash_at + 2 * config.failover_timeout))?;
    let drained = sim.run_until_idle(sim.now() + 3_600 * SECOND)?;
    let stats = sim.stats();
    let promo = stats.promotions.first();
    let table_matches = promo.is_some_and(|p| {
        let prefix = sim.replica(0).plane.log().range(1, p.event.max_seq);
        prefix.len() as u64 == p.event.max_seq
            && ControlState::from_records(&prefix).is_ok_and(|s| s.sessions == p.sessions)
    });
    let primary = sim.primary()?;
    let all_done = drained
        && sessions.iter().all(|sid| {
            primary
                .state()
                .sessions
                .get(sid)
                .is_some_and(|s| s.state == SessionState::Done)
        });
    Ok(FailoverOutcome {
        crash_at,
        promoted_at: promo.map(|p| p.event.at),
        promotions: stats.promotions.len(),
        table_matches,
        all_done,
        split_brain: stats.split_brain,
        one_leader_per_epoch: stats.leaders.values().all(|l| l.len() == 1),
        audit_ok: sim.audit().is_ok(),
        failover_timeout: config.failover_timeout,
    })
}

/// A 20-GPU fleet (five 4-GPU nodes) scripted so that 14 GPUs are busy,
/// 8 of them at 95% and 6 at 40%. Returns the aggregate over a window in
/// which every session is running.
pub fn utilization_fleet() -> Result<UtilizationSummary> {
    let config = SimConfig {
        standby: false,
        ..SimConfig::default()
    };
    let mut sim = fixtures::cluster(config, 5, 4, 64 * GIB)?;
    let jobs = [(4, 95.0), (4, 95.0), (2, 40.0), (2, 40.0), (2, 40.0)];
    for (gpus, pct) in jobs {
        let mut profile = fixtures::profile(200);
        profile.gpu_utilization = UtilizationSeries::Constant { pct };
        let req = fixtures::request(fixtures::MNIST, gpus, 4 * GIB, profile);
        sim.command(|p| p.run(&fixtures::user(ALICE), req))?;
    }
    sim.run_until(120 * SECOND)?;
    Ok(sim.telemetry().aggregate(20 * SECOND, 120 * SECOND))
}

/// One metric point as compared bit-for-bit: (step, name, value bits).
pub type MetricBits = (u64, String, u64);

fn metric_bits(sim: &Simulation, sid: &SessionId) -> Result<Vec<MetricBits>> {
    Ok(sim
        .primary()?
        .state()
        .metrics
        .get(sid)
        .map(|m| {
            m.iter()
                .map(|p| (p.step, p.name.clone(), p.value.to_bits()))
                .collect()
        })
        .unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproOutcome {
    pub case: u64,
    pub run_twice: bool,
    pub resume_splice: bool,
    pub fork_splice: bool,
    pub scores_equal: bool,
}

impl ReproOutcome {
    pub fn passed(&self) -> bool {
        self.run_twice && self.resume_splice && self.fork_splice && self.scores_equal
    }
}

/// Randomized run/stop/resume/fork case with a pinned seed.
pub fn reproducibility_case(case: u64) -> Result<ReproOutcome> {
    use crate::domain::{ConfigValue, ParamResponse};
    use crate::session::ForkRequest;

    let mut rng = ChaCha8Rng::seed_from_u64(mix(case));
    let steps = rng.gen_range(10..=40);
    let mut profile = fixtures::profile(steps);
    profile.curve.asymptote = rng.gen_range(0.5..0.99);
    profile.curve.rate = rng.gen_range(0.05..0.3);
    profile.curve.noise_sigma = rng.gen_range(0.005..0.05);
    profile.checkpoint_every = Some(rng.gen_range(1..=steps / 2));
    profile.response = vec![ParamResponse {
        param: "lr".into(),
        optimum: 0.01,
        width: 1.5,
    }];
    let seed: u64 = rng.gen();
    let stop_at = rng.gen_range(2..steps - 2);
    let mut req = fixtures::request(fixtures::MNIST, rng.gen_range(1..=4), 4 * GIB, profile);
    req.seed = Some(seed);
    req.config.insert(
        "lr".into(),
        ConfigValue::Float(10f64.powf(rng.gen_range(-4.0..-1.0))),
    );
    let alice = fixtures::user(ALICE);
    let config = SimConfig {
        standby: false,
        telemetry: false,
        ..SimConfig::default()
    };
    let fresh = || fixtures::cluster(config.clone(), 1, 8, 64 * GIB);

    let reference = || -> Result<(Vec<MetricBits>, u64)> {
        let mut sim = fresh()?;
        let sid = sim.command(|p| p.run(&alice, req.clone()))?;
        sim.run_until_idle(3_600 * SECOND)?;
        let sub = sim.command(|p| p.submit(&alice, &sid, None))?;
        Ok((metric_bits(&sim, &sid)?, sub.score.to_bits()))
    };
    let (ref_metrics, ref_score) = reference()?;
    let run_twice = reference()? == (ref_metrics.clone(), ref_score);

    let stopped = |sim: &mut Simulation| -> Result<SessionId> {
        let sid = sim.command(|p| p.run(&alice, req.clone()))?;
        while sim.primary()?.state().session(&sid)?.progress_step < stop_at {
            let next = sim.now() + 100;
            sim.run_until(next)?;
        }
        sim.command(|p| p.stop(&alice, &sid))?;
        Ok(sid)
    };

    let mut sim = fresh()?;
    let sid = stopped(&mut sim)?;
    sim.command(|p| p.resume(&alice, &sid))?;
    sim.run_until_idle(sim.now() + 3_600 * SECOND)?;
    let resume_splice = metric_bits(&sim, &sid)? == ref_metrics;
    let resume_score = sim
        .command(|p| p.submit(&alice, &sid, None))?
        .score
        .to_bits();

    let mut sim = fresh()?;
    let parent = stopped(&mut sim)?;
    let child = sim.command(|p| {
        p.fork(
            &alice,
            &parent,
            ForkRequest {
                overrides: Default::default(),
                seed: Some(seed),
            },
        )
    })?;
    sim.run_until_idle(sim.now() + 3_600 * SECOND)?;
    let cut = sim.primary()?.state().session(&child)?.start_step;
    let mut spliced: Vec<MetricBits> = metric_bits(&sim, &parent)?
        .into_iter()
        .filter(|m| m.0 <= cut)
        .collect();
    spliced.extend(metric_bits(&sim, &child)?);
    let fork_splice = spliced == ref_metrics;
    let fork_score = sim
        .command(|p| p.submit(&alice, &child, None))?
        .score
        .to_bits();

    Ok(ReproOutcome {
        case,
        run_twice,
        resume_splice,
        fork_splice,
        scores_equal: resume_score == ref_score && fork_score == ref_score,
    })
}

fn mix(x: u64) -> u64 {
    super::rng::mix64(x ^ 0x7e9d_0c1a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditOutcome {
    /// Virtual time at which the user's balance first reached zero.
    pub exhausted_at: Option<Millis>,
    /// Latest stop among the user's sessions, minus `exhausted_at`.
    pub stop_lag: Option<Millis>,
    pub tick_interval: Millis,
    pub all_stopped_with_checkpoint: bool,
    pub rejected_after: bool,
    pub bystander_running: bool,
    pub credit_stop_notifications: usize,
}

impl CreditOutcome {
    pub fn passed(&self) -> bool {
        self.exhausted_at.is_some()
            && self.stop_lag.is_some_and(|l| l <= self.tick_interval)
            && self.all_stopped_with_checkpoint
            && self.rejected_after
            && self.bystander_running
            && self.credit_stop_notifications == 2
    }
}

/// Alice runs two 2-GPU sessions on 3 credits; bob runs alongside.
pub fn credit_trial() -> Result<CreditOutcome> {
    use crate::registry::UserAction;

    let config = SimConfig {
        standby: false,
        telemetry: false,
        ..SimConfig::default()
    };
    let tick_interval = config.tick_interval;
    let mut sim = fixtures::cluster(config, 2, 8, 64 * GIB)?;
    let alice = fixtures::user(ALICE);
    let bob = fixtures::user(BOB);
    sim.command(|p| {
        p.manage_user(
            &fixtures::user(fixtures::ADMIN),
            UserAction::SetCredit {
                user_id: alice.clone(),
                credit: 3,
            },
        )
    })?;
    let long = || fixtures::request(fixtures::MNIST, 2, 4 * GIB, fixtures::profile(1_000));
    let mine = [
        sim.command(|p| p.run(&alice, long()))?,
        sim.command(|p| p.run(&alice, long()))?,
    ];
    let theirs = sim.command(|p| p.run(&bob, long()))?;
    sim.run_until(120 * SECOND)?;

    let plane = sim.primary()?;
    let mut state = ControlState::default();
    let mut exhausted_at = None;
    for r in plane.log().replay(1)? {
        state.apply_record(&r)?;
        if exhausted_at.is_none()
            && state
                .users
                .get(&alice)
                .is_some_and(|u| u.credit_balance == 0)
        {
            exhausted_at = Some(r.ts);
        }
    }
    let mut stops = Vec::new();
    let mut all_stopped_with_checkpoint = true;
    for sid in &mine {
        let s = plane.state().session(sid)?;
        let ckpt = plane.state().latest_checkpoint(sid);
        all_stopped_with_checkpoint &= s.state == SessionState::Stopped
            && ckpt.is_some_and(|c| c.step == s.progress_step && c.step > 0);
        stops.extend(
            s.history
                .iter()
                .filter(|t| t.to == SessionState::Stopped)
                .map(|t| t.at),
        );
    }
    let stop_lag = match (exhausted_at, stops.iter().max()) {
        (Some(e), Some(s)) if stops.len() == mine.len() => Some(s.saturating_sub(e)),
        _ => None,
    };
    let bystander_running = plane.state().session(&theirs)?.state == SessionState::Running;
    let credit_stop_notifications = sim
        .stats()
        .notifications
        .iter()
        .filter(|n| n.kind == crate::domain::NotificationKind::CreditStop && n.recipient == alice)
        .count();
    let rejected_after = matches!(
        sim.command(|p| p.run(&alice, long())),
        Err(Error::Rejected(crate::RejectReason::CreditExhausted))
    );
    Ok(CreditOutcome {
        exhausted_at,
        stop_lag,
        tick_interval,
        all_stopped_with_checkpoint,
        rejected_after,
        bystander_running,
        credit_stop_notifications,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OomOutcome {
    pub expected_step: u64,
    pub killed_state: SessionState,
    /// Last completed step of the killed session.
    pub killed_progress: u64,
    pub neighbour_state: SessionState,
    pub neighbour_progress: u64,
    pub oom_notifications: usize,
    pub shared_node: bool,
}

impl OomOutcome {
    pub fn passed(&self) -> bool {
        self.killed_state == SessionState::KilledOom
            && self.killed_progress + 1 == self.expected_step
            && self.neighbour_state == SessionState::Done
            && self.neighbour_progress == 20
            && self.oom_notifications == 1
            && self.shared_node
    }
}

/// A session whose memory ramps past its allocation shares a node with a
/// well-behaved neighbour.
pub fn oom_trial() -> Result<OomOutcome> {
    let config = SimConfig {
        standby: false,
        telemetry: false,
        ..SimConfig::default()
    };
    let mut sim = fixtures::cluster(config, 1, 8, 64 * GIB)?;
    let mut hungry = fixtures::profile(20);
    hungry.peak_memory = 8 * GIB;
    hungry.base_memory = Some(2 * GIB);
    hungry.peak_step = Some(12);
    let allocation = 4 * GIB;
    let expected_step = hungry
        .first_exceeding_step(allocation)
        .ok_or_else(|| Error::invalid("profile never exceeds its allocation"))?;
    let victim = sim.command(|p| {
        p.run(
            &fixtures::user(ALICE),
            fixtures::request(fixtures::MNIST, 2, allocation, hungry),
        )
    })?;
    let neighbour = sim.command(|p| {
        p.run(
            &fixtures::user(BOB),
            fixtures::request(fixtures::MNIST, 2, allocation, fixtures::profile(20)),
        )
    })?;
    sim.run_until_idle(600 * SECOND)?;
    let plane = sim.primary()?;
    let v = plane.state().session(&victim)?;
    let n = plane.state().session(&neighbour)?;
    Ok(OomOutcome {
        expected_step,
        killed_state: v.state,
        killed_progress: v.progress_step,
        neighbour_state: n.state,
        neighbour_progress: n.progress_step,
        oom_notifications: sim
            .stats()
            .notifications
            .iter()
            .filter(|n| n.kind == crate::domain::NotificationKind::KilledOom)
            .count(),
        shared_node: v.last_node.is_some() && v.last_node == n.last_node,
    })
}
