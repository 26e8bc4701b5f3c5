//! Discrete-event cluster simulator: two scheduler replicas, node agents,
//! a network with per-link FIFO delivery and injectable delays, and faults.
//!
//! Everything runs on virtual time; a run is a pure function of the config,
//! the command trace and the seeds inside it.

pub mod agent;
pub mod experiments;
pub mod fixtures;
mod reconcile;
pub mod rng;
pub mod scenario;
pub mod telemetry;
pub mod workload;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::audit::{audit_log, AuditReport};
use crate::clock::{Clock, Millis, VirtualClock, SECOND};
use crate::control::{ControlPlane, Directive, PlaneConfig};
use crate::domain::{NodeDescriptor, Notification, Session, SessionState, GIB};
use crate::error::{Error, Result};
use crate::ids::{NodeId, SessionId};
use crate::log::{EventLog, LogRecord};
use crate::scheduler::failover::{
    FailoverConfig, HeartbeatAck, HeartbeatMessage, PromotionEvent, Replica, Role,
};

pub use agent::{NodeAgent, NodeReport, NodeStatus, TransferStats};
pub use telemetry::{aggregate_utilization, TelemetryStore, UtilizationSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Dataset copy bandwidth in bytes per virtual second.
    pub bandwidth: u64,
    pub image_pull_time: Millis,
    pub heartbeat_interval: Millis,
    pub failover_timeout: Millis,
    pub telemetry_period: Millis,
    pub tick_interval: Millis,
    /// Silence after which the primary declares a node dead.
    pub node_timeout: Millis,
    /// One-way message latency.
    pub latency: Millis,
    /// Run a secondary replica.
    pub standby: bool,
    /// Apply every primary record to the secondary immediately.
    pub synchronous_replication: bool,
    /// Replicate the records of a client command before acknowledging it.
    pub commit_commands: bool,
    pub telemetry: bool,
    pub plane: PlaneConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            bandwidth: GIB,
            image_pull_time: 2 * SECOND,
            heartbeat_interval: SECOND,
            failover_timeout: 3 * SECOND,
            telemetry_period: SECOND,
            tick_interval: SECOND,
            node_timeout: 3 * SECOND,
            latency: 5,
            standby: true,
            synchronous_replication: false,
            commit_commands: true,
            telemetry: true,
            plane: PlaneConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bandwidth", self.bandwidth),
            ("telemetry_period", self.telemetry_period),
            ("tick_interval", self.tick_interval),
            ("node_timeout", self.node_timeout),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        self.failover().validate()
    }

    pub fn failover(&self) -> FailoverConfig {
        FailoverConfig {
            heartbeat_interval: self.heartbeat_interval,
            failover_timeout: self.failover_timeout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTarget {
    /// Whichever replica is primary when the fault fires.
    Primary,
    Replica(usize),
    Node(NodeId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FaultKind {
    Crash,
    /// Brings a crashed replica back with its log intact.
    Restart,
    /// Adds `duration` of latency to messages sent by or to the target while
    /// the window `[at, at + duration)` is open.
    NetworkDelay {
        duration: Millis,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Endpoint {
    Replica(usize),
    Node(NodeId),
}

#[derive(Debug, Clone)]
enum Message {
    Heartbeat {
        msg: HeartbeatMessage,
        records: Vec<LogRecord>,
    },
    Ack(HeartbeatAck),
    Directive(Directive),
    StatusRequest {
        epoch: u64,
    },
    Report(NodeReport),
}

#[derive(Debug, Clone)]
enum SimEvent {
    Deliver {
        from: Endpoint,
        incarnation: u64,
        to: Endpoint,
        msg: Message,
    },
    Tick(usize),
    Heartbeat(usize),
    FailoverCheck(usize),
    NodeHeartbeat(NodeId),
    Telemetry,
    PrepareDone {
        node: NodeId,
        session: SessionId,
        token: u64,
    },
    StepDone {
        node: NodeId,
        session: SessionId,
        token: u64,
    },
    Fault {
        target: FaultTarget,
        kind: FaultKind,
    },
    ReconcileDeadline {
        replica: usize,
        epoch: u64,
    },
}

#[derive(Debug)]
struct Reconciling {
    epoch: u64,
    pending: BTreeSet<NodeId>,
    statuses: Vec<NodeStatus>,
}

#[derive(Debug)]
struct Host {
    replica: Replica,
    alive: bool,
    incarnation: u64,
    node_seen: BTreeMap<NodeId, Millis>,
    reconciling: Option<Reconciling>,
}

/// A promotion together with the session table the new primary started from.
#[derive(Debug, Clone, PartialEq)]
pub struct PromotionRecord {
    pub event: PromotionEvent,
    pub sessions: BTreeMap<SessionId, Session>,
    pub queue: Vec<SessionId>,
}

#[derive(Debug, Clone, Default)]
pub struct SimStats {
    pub transfers: TransferStats,
    pub promotions: Vec<PromotionRecord>,
    pub demotions: u64,
    pub fenced: u64,
    pub messages: u64,
    pub events: u64,
    pub notifications: Vec<Notification>,
    /// Replicas that acted as primary, by epoch.
    pub leaders: BTreeMap<u64, BTreeSet<usize>>,
    /// Event-loop steps at which two live replicas both claimed the same epoch.
    pub split_brain: u64,
}

#[derive(Debug, Clone)]
struct DelayWindow {
    target: Endpoint,
    from: Millis,
    until: Millis,
    extra: Millis,
}

pub struct Simulation {
    config: SimConfig,
    clock: VirtualClock,
    hosts: Vec<Host>,
    agents: BTreeMap<NodeId, NodeAgent>,
    agent_incarnation: BTreeMap<NodeId, u64>,
    queue: BTreeMap<(Millis, u64), SimEvent>,
    next_event: u64,
    link_clock: BTreeMap<(Endpoint, Endpoint), Millis>,
    delays: Vec<DelayWindow>,
    telemetry: TelemetryStore,
    stats: SimStats,
}

impl std::fmt::Debug for Simulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulation")
            .field("now", &self.clock.now())
            .field("nodes", &self.agents.len())
            .field("pending_events", &self.queue.len())
            .finish()
    }
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self> {
        let logs = if config.standby {
            vec![EventLog::in_memory(), EventLog::in_memory()]
        } else {
            vec![EventLog::in_memory()]
        };
        Self::with_logs(config, logs)
    }

    /// Starts replicas over the given logs; the first becomes primary.
    pub fn with_logs(config: SimConfig, logs: Vec<EventLog>) -> Result<Self> {
        config.validate()?;
        if logs.is_empty() || logs.len() > 2 {
            return Err(Error::invalid("a simulation runs one or two replicas"));
        }
        let clock = VirtualClock::new(0);
        let mut hosts = Vec::new();
        for (i, log) in logs.into_iter().enumerate() {
            let name = if i == 0 { "primary" } else { "secondary" };
            let plane =
                ControlPlane::new(name, log, Arc::new(clock.clone()), config.plane.clone())?;
            let role = if i == 0 {
                Role::Primary
            } else {
                Role::Secondary
            };
            hosts.push(Host {
                replica: Replica::new(plane, role, config.failover()),
                alive: true,
                incarnation: 0,
                node_seen: BTreeMap::new(),
                reconciling: None,
            });
        }
        if hosts[0].replica.plane.epoch() == 0 {
            hosts[0].replica.bootstrap()?;
        } else {
            hosts[0].replica.plane.rebuild()?;
        }
        let mut sim = Self {
            config,
            clock,
            hosts,
            agents: BTreeMap::new(),
            agent_incarnation: BTreeMap::new(),
            queue: BTreeMap::new(),
            next_event: 0,
            link_clock: BTreeMap::new(),
            delays: Vec::new(),
            telemetry: TelemetryStore::default(),
            stats: SimStats::default(),
        };
        for i in 0..sim.hosts.len() {
            sim.schedule(sim.config.tick_interval, SimEvent::Tick(i));
            sim.schedule(sim.config.heartbeat_interval, SimEvent::Heartbeat(i));
        }
        if sim.hosts.len() == 2 {
            sim.schedule(sim.config.failover_timeout + 1, SimEvent::FailoverCheck(1));
        }
        sim.observe_leaders();
        if sim.config.telemetry {
            sim.schedule(sim.config.telemetry_period, SimEvent::Telemetry);
        }
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now(&self) -> Millis {
        self.clock.now()
    }

    pub fn clock(&self) -> VirtualClock {
        self.clock.clone()
    }

    pub fn stats(&self) -> &SimStats {
        &self.stats
    }

    pub fn telemetry(&self) -> &TelemetryStore {
        &self.telemetry
    }

    pub fn replicas(&self) -> usize {
        self.hosts.len()
    }

    pub fn replica(&self, i: usize) -> &Replica {
        &self.hosts[i].replica
    }

    pub fn replica_alive(&self, i: usize) -> bool {
        self.hosts[i].alive
    }

    pub fn agent(&self, node: &NodeId) -> Option<&NodeAgent> {
        self.agents.get(node)
    }

    pub fn agents(&self) -> impl Iterator<Item = &NodeAgent> {
        self.agents.values()
    }

    /// The live replica acting as primary in the highest epoch, if any.
    pub fn primary_index(&self) -> Option<usize> {
        self.hosts
            .iter()
            .enumerate()
            .filter(|(_, h)| h.alive && h.replica.is_primary())
            .max_by_key(|(_, h)| h.replica.epoch())
            .map(|(i, _)| i)
    }

    pub fn primary(&self) -> Result<&ControlPlane> {
        let i = self.primary_index().ok_or(Error::NotPrimary { epoch: 0 })?;
        Ok(&self.hosts[i].replica.plane)
    }

    /// Runs a command on the active primary and dispatches what it produced.
    pub fn command<T>(&mut self, f: impl FnOnce(&mut ControlPlane) -> Result<T>) -> Result<T> {
        let i = self.primary_index().ok_or(Error::NotPrimary { epoch: 0 })?;
        let out = f(&mut self.hosts[i].replica.plane);
        self.flush(i)?;
        if self.config.commit_commands {
            self.replicate_now(i)?;
        }
        out
    }

    /// Registers a node with the primary and starts its agent.
    pub fn spawn_node(
        &mut self,
        node_id: Option<NodeId>,
        total_gpus: u32,
        total_memory: u64,
    ) -> Result<NodeDescriptor> {
        let node_id = node_id.unwrap_or_else(|| {
            let mut n = self.agents.len() + 1;
            loop {
                let id = NodeId::new(format!("node-{n}"));
                if !self.agents.contains_key(&id) {
                    break id;
                }
                n += 1;
            }
        });
        if self.agents.contains_key(&node_id) {
            return Err(Error::Duplicate {
                kind: "node",
                id: node_id.to_string(),
            });
        }
        let node = self.command(|p| p.register_node(node_id.clone(), total_gpus, total_memory))?;
        let mut agent = NodeAgent::new(node_id.clone(), total_gpus, total_memory);
        agent.max_epoch = self.primary()?.epoch();
        self.agents.insert(node_id.clone(), agent);
        self.agent_incarnation.insert(node_id.clone(), 0);
        let now = self.now();
        for h in &mut self.hosts {
            h.node_seen.insert(node_id.clone(), now);
        }
        self.schedule(
            now + self.config.heartbeat_interval,
            SimEvent::NodeHeartbeat(node_id),
        );
        Ok(node)
    }

    pub fn inject_fault(&mut self, at: Millis, target: FaultTarget, kind: FaultKind) {
        self.schedule(at.max(self.now()), SimEvent::Fault { target, kind });
    }

    /// Processes every event up to and including `t`, then sets the clock to `t`.
    pub fn run_until(&mut self, t: Millis) -> Result<()> {
        while let Some((&(at, _), _)) = self.queue.first_key_value() {
            if at > t {
                break;
            }
            self.step()?;
        }
        self.clock.advance_to(t);
        Ok(())
    }

    /// Runs until no session is queued or running on the primary, or `limit`.
    /// Returns whether the cluster went idle.
    pub fn run_until_idle(&mut self, limit: Millis) -> Result<bool> {
        let step = self.config.tick_interval;
        loop {
            if self.is_idle() {
                return Ok(true);
            }
            let now = self.now();
            if now >= limit {
                return Ok(false);
            }
            self.run_until((now + step).min(limit))?;
        }
    }

    fn is_idle(&self) -> bool {
        let Ok(plane) = self.primary() else {
            return false;
        };
        let any_reconciling = self.hosts.iter().any(|h| h.reconciling.is_some());
        !any_reconciling
            && plane.state().sessions.values().all(|s| {
                !matches!(
                    s.state,
                    SessionState::Queued | SessionState::Preparing | SessionState::Running
                )
            })
    }

    /// Audits the primary's full log.
    pub fn audit(&self) -> Result<AuditReport> {
        let plane = self.primary()?;
        plane.verify_replay()?;
        audit_log(&plane.log().replay(1)?)
    }

    fn schedule(&mut self, at: Millis, event: SimEvent) {
        self.next_event += 1;
        self.queue.insert((at, self.next_event), event);
    }

    /// Processes the next event. Returns false when none remain.
    pub fn step(&mut self) -> Result<bool> {
        let Some(((at, _), event)) = self.queue.pop_first() else {
            return Ok(false);
        };
        self.clock.advance_to(at);
        self.stats.events += 1;
        self.handle(event)?;
        self.observe_leaders();
        Ok(true)
    }

    fn observe_leaders(&mut self) {
        let mut claims: BTreeMap<u64, usize> = BTreeMap::new();
        for (i, h) in self.hosts.iter().enumerate() {
            if h.alive && h.replica.is_primary() {
                let epoch = h.replica.epoch();
                self.stats.leaders.entry(epoch).or_default().insert(i);
                *claims.entry(epoch).or_default() += 1;
            }
        }
        if claims.values().any(|n| *n > 1) {
            self.stats.split_brain += 1;
        }
    }

    fn incarnation(&self, e: &Endpoint) -> u64 {
        match e {
            Endpoint::Replica(i) => self.hosts[*i].incarnation,
            Endpoint::Node(n) => self.agent_incarnation.get(n).copied().unwrap_or(0),
        }
    }

    fn endpoint_alive(&self, e: &Endpoint) -> bool {
        match e {
            Endpoint::Replica(i) => self.hosts[*i].alive,
            Endpoint::Node(n) => self.agents.get(n).is_some_and(|a| a.alive),
        }
    }

    fn send(&mut self, from: Endpoint, to: Endpoint, msg: Message) {
        let now = self.now();
        let extra: Millis = self
            .delays
            .iter()
            .filter(|d| (d.target == from || d.target == to) && now >= d.from && now < d.until)
            .map(|d| d.extra)
            .max()
            .unwrap_or(0);
        let link = (from.clone(), to.clone());
        let earliest = now + self.config.latency + extra;
        let at = self
            .link_clock
            .get(&link)
            .map_or(earliest, |last| earliest.max(*last));
        self.link_clock.insert(link, at);
        self.stats.messages += 1;
        let incarnation = self.incarnation(&from);
        self.schedule(
            at,
            SimEvent::Deliver {
                from,
                incarnation,
                to,
                msg,
            },
        );
    }

    fn report(&mut self, node: &NodeId, report: NodeReport) {
        for i in 0..self.hosts.len() {
            self.send(
                Endpoint::Node(node.clone()),
                Endpoint::Replica(i),
                Message::Report(report.clone()),
            );
        }
    }

    /// Sends the directives and notifications replica `i` produced.
    fn flush(&mut self, i: usize) -> Result<()> {
        let directives = self.hosts[i].replica.plane.take_directives();
        let notes = self.hosts[i].replica.plane.take_notifications();
        if self.hosts[i].alive && self.hosts[i].replica.is_primary() {
            self.stats.notifications.extend(notes);
            for d in directives {
                let node = match &d {
                    Directive::Start(spec) => spec.node_id.clone(),
                    Directive::Stop { node_id, .. } | Directive::Continue { node_id, .. } => {
                        node_id.clone()
                    }
                };
                self.send(
                    Endpoint::Replica(i),
                    Endpoint::Node(node),
                    Message::Directive(d),
                );
            }
            if self.config.synchronous_replication {
                self.replicate_now(i)?;
            }
        }
        Ok(())
    }

    fn replicate_now(&mut self, primary: usize) -> Result<()> {
        let Some(peer) = (0..self.hosts.len()).find(|j| *j != primary) else {
            return Ok(());
        };
        if !self.hosts[peer].alive || self.hosts[peer].replica.is_primary() {
            return Ok(());
        }
        let from = self.hosts[peer].replica.plane.log().max_seq() + 1;
        let records = self.hosts[primary]
            .replica
            .plane
            .log()
            .range(from, u64::MAX);
        self.hosts[peer].replica.replicate(&records)?;
        Ok(())
    }

    fn handle(&mut self, event: SimEvent) -> Result<()> {
        let now = self.now();
        match event {
            SimEvent::Deliver {
                from,
                incarnation,
                to,
                msg,
            } => {
                if incarnation != self.incarnation(&from) || !self.endpoint_alive(&to) {
                    return Ok(());
                }
                match to {
                    Endpoint::Replica(i) => self.deliver_to_replica(i, from, msg)?,
                    Endpoint::Node(n) => self.deliver_to_node(&n, msg)?,
                }
            }
            SimEvent::Tick(i) => {
                self.schedule(now + self.config.tick_interval, SimEvent::Tick(i));
                let h = &self.hosts[i];
                if h.alive && h.replica.is_primary() && h.reconciling.is_none() {
                    self.primary_tick(i)?;
                }
            }
            SimEvent::Heartbeat(i) => {
                self.schedule(now + self.config.heartbeat_interval, SimEvent::Heartbeat(i));
                if self.hosts[i].alive {
                    let h = &self.hosts[i].replica;
                    let msg = h.heartbeat(now);
                    let records = if h.is_primary() {
                        h.unacked_records()
                    } else {
                        Vec::new()
                    };
                    for j in 0..self.hosts.len() {
                        if j != i {
                            self.send(
                                Endpoint::Replica(i),
                                Endpoint::Replica(j),
                                Message::Heartbeat {
                                    msg,
                                    records: records.clone(),
                                },
                            );
                        }
                    }
                }
            }
            SimEvent::FailoverCheck(i) => {
                if self.hosts[i].alive {
                    self.failover_check(i)?;
                }
            }
            SimEvent::NodeHeartbeat(n) => {
                if self.agents.get(&n).is_some_and(|a| a.alive) {
                    self.schedule(
                        now + self.config.heartbeat_interval,
                        SimEvent::NodeHeartbeat(n.clone()),
                    );
                    self.report(&n, NodeReport::Heartbeat { node_id: n.clone() });
                }
            }
            SimEvent::Telemetry => {
                self.schedule(now + self.config.telemetry_period, SimEvent::Telemetry);
                let samples: Vec<_> = self
                    .agents
                    .values()
                    .filter(|a| a.alive)
                    .flat_map(|a| a.sample(now))
                    .collect();
                for s in samples {
                    self.telemetry.record(s)?;
                }
            }
            SimEvent::PrepareDone {
                node,
                session,
                token,
            } => {
                let cache_enabled = self.config.plane.cache_enabled;
                let capacity = self.config.plane.cache_capacity;
                let Some(agent) = self.agents.get_mut(&node).filter(|a| a.alive) else {
                    return Ok(());
                };
                if let Some(result) = agent.prepared(&session, token, now, cache_enabled, capacity)
                {
                    self.after_step(&node, &session, token, result);
                }
            }
            SimEvent::StepDone {
                node,
                session,
                token,
            } => {
                let Some(agent) = self.agents.get_mut(&node).filter(|a| a.alive) else {
                    return Ok(());
                };
                if let Some(result) = agent.step(&session, token) {
                    self.after_step(&node, &session, token, result);
                }
            }
            SimEvent::Fault { target, kind } => self.apply_fault(target, kind)?,
            SimEvent::ReconcileDeadline { replica, epoch } => {
                if self.hosts[replica]
                    .reconciling
                    .as_ref()
                    .is_some_and(|r| r.epoch == epoch)
                {
                    self.finish_reconcile(replica)?;
                }
            }
        }
        Ok(())
    }

    fn after_step(
        &mut self,
        node: &NodeId,
        session: &SessionId,
        token: u64,
        result: agent::StepResult,
    ) {
        let reports = match result {
            agent::StepResult::Continue { reports, delay } => {
                self.schedule(
                    self.now() + delay,
                    SimEvent::StepDone {
                        node: node.clone(),
                        session: session.clone(),
                        token,
                    },
                );
                reports
            }
            agent::StepResult::Idle { reports } => reports,
        };
        for r in reports {
            self.report(node, r);
        }
    }

    fn primary_tick(&mut self, i: usize) -> Result<()> {
        let now = self.now();
        let timeout = self.config.node_timeout;
        let silent: Vec<NodeId> = {
            let h = &self.hosts[i];
            h.replica
                .plane
                .state()
                .nodes
                .values()
                .filter(|n| n.is_alive())
                .filter(|n| {
                    h.node_seen
                        .get(&n.node_id)
                        .is_none_or(|seen| now.saturating_sub(*seen) > timeout)
                })
                .map(|n| n.node_id.clone())
                .collect()
        };
        for n in silent {
            self.hosts[i].replica.plane.on_node_dead(&n)?;
        }
        self.hosts[i].replica.plane.tick()?;
        self.flush(i)
    }

    fn failover_check(&mut self, i: usize) -> Result<()> {
        let now = self.now();
        let Some(promotion) = self.hosts[i].replica.failover_check(now)? else {
            return Ok(());
        };
        self.on_promoted(i, promotion)
    }

    fn on_promoted(&mut self, i: usize, event: PromotionEvent) -> Result<()> {
        let now = self.now();
        tracing::info!(replica = i, epoch = event.epoch, "promoted");
        let (sessions, queue, nodes) = {
            let state = self.hosts[i].replica.plane.state();
            (
                state.sessions.clone(),
                state.queue.iter().cloned().collect(),
                state
                    .nodes
                    .values()
                    .filter(|n| n.is_alive())
                    .map(|n| n.node_id.clone())
                    .collect::<BTreeSet<_>>(),
            )
        };
        self.stats.promotions.push(PromotionRecord {
            event: event.clone(),
            sessions,
            queue,
        });
        let host = &mut self.hosts[i];
        for n in &nodes {
            host.node_seen.insert(n.clone(), now);
        }
        host.reconciling = Some(Reconciling {
            epoch: event.epoch,
            pending: nodes.clone(),
            statuses: Vec::new(),
        });
        for n in nodes {
            self.send(
                Endpoint::Replica(i),
                Endpoint::Node(n),
                Message::StatusRequest { epoch: event.epoch },
            );
        }
        self.schedule(
            now + self.config.failover_timeout,
            SimEvent::ReconcileDeadline {
                replica: i,
                epoch: event.epoch,
            },
        );
        if self.hosts[i]
            .reconciling
            .as_ref()
            .is_some_and(|r| r.pending.is_empty())
        {
            self.finish_reconcile(i)?;
        }
        Ok(())
    }

    fn finish_reconcile(&mut self, i: usize) -> Result<()> {
        let Some(rec) = self.hosts[i].reconciling.take() else {
            return Ok(());
        };
        let plane = &mut self.hosts[i].replica.plane;
        for status in &rec.statuses {
            reconcile::reconcile_node(plane, status)?;
        }
        for n in &rec.pending {
            plane.on_node_dead(n)?;
        }
        self.flush(i)
    }

    fn deliver_to_replica(&mut self, i: usize, from: Endpoint, msg: Message) -> Result<()> {
        let now = self.now();
        match msg {
            Message::Heartbeat { msg, records } => {
                let was_primary = self.hosts[i].replica.is_primary();
                let ack = self.hosts[i]
                    .replica
                    .record_heartbeat(&msg, &records, now)?;
                self.after_role_check(i, was_primary);
                if !self.hosts[i].replica.is_primary() {
                    let check = self.hosts[i].replica.last_peer_heartbeat()
                        + self.config.failover_timeout
                        + 1;
                    self.schedule(check, SimEvent::FailoverCheck(i));
                }
                self.send(Endpoint::Replica(i), from, Message::Ack(ack));
            }
            Message::Ack(ack) => {
                let was_primary = self.hosts[i].replica.is_primary();
                self.hosts[i].replica.record_ack(&ack)?;
                self.after_role_check(i, was_primary);
            }
            Message::Report(report) => {
                let h = &self.hosts[i];
                if !h.replica.is_primary() {
                    return Ok(());
                }
                self.primary_report(i, report)?;
                self.flush(i)?;
            }
            Message::Directive(_) | Message::StatusRequest { .. } => {}
        }
        Ok(())
    }

    fn after_role_check(&mut self, i: usize, was_primary: bool) {
        if was_primary && !self.hosts[i].replica.is_primary() {
            self.stats.demotions += 1;
            self.hosts[i].reconciling = None;
        }
    }

    fn primary_report(&mut self, i: usize, report: NodeReport) -> Result<()> {
        let now = self.now();
        let host = &mut self.hosts[i];
        let plane = &mut host.replica.plane;
        match report {
            NodeReport::Heartbeat { node_id } => {
                host.node_seen.insert(node_id, now);
            }
            NodeReport::Status(status) => {
                if let Some(rec) = host.reconciling.as_mut() {
                    if status.epoch == rec.epoch && rec.pending.remove(&status.node_id) {
                        rec.statuses.push(status);
                        if rec.pending.is_empty() {
                            self.finish_reconcile(i)?;
                        }
                    }
                }
            }
            NodeReport::BindFailed {
                session_id,
                node_id,
            } => {
                let bound_here = plane
                    .state()
                    .sessions
                    .get(&session_id)
                    .is_some_and(|s| s.node_id.as_ref() == Some(&node_id));
                if bound_here {
                    plane.bind_failed(&session_id)?;
                }
            }
            NodeReport::Prepared {
                session_id,
                node_id,
                report,
            } => {
                plane.on_prepared(&session_id, &node_id, &report)?;
            }
            NodeReport::Step {
                session_id,
                node_id,
                step,
                metrics,
            } => {
                reconcile::report_step(plane, &session_id, &node_id, step, metrics)?;
            }
            NodeReport::Barrier {
                session_id,
                node_id,
                step,
            } => {
                reconcile::catch_up(plane, &session_id, &node_id, step, None)?;
                plane.on_barrier(&session_id, &node_id, step)?;
            }
            NodeReport::Finished {
                session_id,
                node_id,
                outcome,
            } => {
                let last = reconcile::outcome_step(plane, &session_id, outcome);
                reconcile::report_finished(plane, &session_id, &node_id, outcome, last)?;
            }
        }
        Ok(())
    }

    fn deliver_to_node(&mut self, node: &NodeId, msg: Message) -> Result<()> {
        let now = self.now();
        let bandwidth = self.config.bandwidth;
        let pull = self.config.image_pull_time;
        let cache_enabled = self.config.plane.cache_enabled;
        let Some(agent) = self.agents.get_mut(node) else {
            return Ok(());
        };
        match msg {
            Message::StatusRequest { epoch } => {
                if agent.observe_epoch(epoch) {
                    let status = agent.status();
                    self.report(node, NodeReport::Status(status));
                } else {
                    self.stats.fenced += 1;
                }
            }
            Message::Directive(d) => {
                let epoch = match &d {
                    Directive::Start(spec) => spec.epoch,
                    Directive::Stop { epoch, .. } | Directive::Continue { epoch, .. } => *epoch,
                };
                if !agent.observe_epoch(epoch) {
                    self.stats.fenced += 1;
                    return Ok(());
                }
                match d {
                    Directive::Start(spec) => {
                        let sid = spec.session_id.clone();
                        match agent.start(
                            *spec,
                            now,
                            bandwidth,
                            pull,
                            cache_enabled,
                            &mut self.stats.transfers,
                        ) {
                            Some((token, delay)) => self.schedule(
                                now + delay,
                                SimEvent::PrepareDone {
                                    node: node.clone(),
                                    session: sid,
                                    token,
                                },
                            ),
                            None => {
                                if !agent.tasks.contains_key(&sid) {
                                    self.report(
                                        node,
                                        NodeReport::BindFailed {
                                            session_id: sid,
                                            node_id: node.clone(),
                                        },
                                    );
                                }
                            }
                        }
                    }
                    Directive::Stop { session_id, .. } => {
                        agent.stop(&session_id);
                    }
                    Directive::Continue {
                        session_id, config, ..
                    } => {
                        if let Some((token, delay)) = agent.resume_from_barrier(&session_id, config)
                        {
                            self.schedule(
                                now + delay,
                                SimEvent::StepDone {
                                    node: node.clone(),
                                    session: session_id,
                                    token,
                                },
                            );
                        }
                    }
                }
            }
            Message::Heartbeat { .. } | Message::Ack(_) | Message::Report(_) => {}
        }
        Ok(())
    }

    fn resolve(&self, target: &FaultTarget) -> Option<Endpoint> {
        match target {
            FaultTarget::Primary => self.primary_index().map(Endpoint::Replica),
            FaultTarget::Replica(i) if *i < self.hosts.len() => Some(Endpoint::Replica(*i)),
            FaultTarget::Replica(_) => None,
            FaultTarget::Node(n) => self
                .agents
                .contains_key(n)
                .then(|| Endpoint::Node(n.clone())),
        }
    }

    fn apply_fault(&mut self, target: FaultTarget, kind: FaultKind) -> Result<()> {
        let now = self.now();
        let Some(endpoint) = self.resolve(&target) else {
            tracing::warn!(?target, "fault target not found");
            return Ok(());
        };
        match (kind, endpoint) {
            (FaultKind::Crash, Endpoint::Replica(i)) => {
                let h = &mut self.hosts[i];
                h.alive = false;
                h.incarnation += 1;
                h.reconciling = None;
            }
            (FaultKind::Crash, Endpoint::Node(n)) => {
                if let Some(a) = self.agents.get_mut(&n) {
                    a.crash();
                }
                *self.agent_incarnation.entry(n).or_default() += 1;
            }
            (FaultKind::Restart, Endpoint::Replica(i)) => {
                let nodes: Vec<NodeId> = self.agents.keys().cloned().collect();
                let h = &mut self.hosts[i];
                if !h.alive {
                    h.alive = true;
                    h.incarnation += 1;
                    for n in nodes {
                        h.node_seen.insert(n, now);
                    }
                    if !h.replica.is_primary() {
                        let check = now + self.config.failover_timeout + 1;
                        self.schedule(check, SimEvent::FailoverCheck(i));
                    }
                }
            }
            (FaultKind::Restart, Endpoint::Node(_)) => {
                tracing::warn!("nodes do not restart; spawn a new one instead");
            }
            (FaultKind::NetworkDelay { duration }, endpoint) => {
                self.delays.push(DelayWindow {
                    target: endpoint,
                    from: now,
                    until: now + duration,
                    extra: duration,
                });
            }
        }
        Ok(())
    }

    /// Every session in the primary's table.
    pub fn sessions(&self) -> Result<Vec<Session>> {
        Ok(self.primary()?.state().sessions.values().cloned().collect())
    }
}
