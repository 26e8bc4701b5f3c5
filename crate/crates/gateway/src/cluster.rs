//! The simulated cluster behind the API: one lock around the simulation,
//! a wall-clock driver for virtual time, and notification delivery.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use mlcluster_core::clock::Millis;
use mlcluster_core::control::ControlPlane;
use mlcluster_core::domain::Notification;
use mlcluster_core::ids::UserId;
use mlcluster_core::log::EventLog;
use mlcluster_core::session::notify::{Dispatcher, FileSink};
use mlcluster_core::sim::{FaultKind, FaultTarget, Simulation};
use mlcluster_core::{Error, Result};

use crate::config::GatewayConfig;
use crate::webhook::WebhookSink;

pub struct Cluster {
    config: GatewayConfig,
    sim: Mutex<Simulation>,
    dispatcher: Mutex<(Dispatcher, usize)>,
}

impl std::fmt::Debug for Cluster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cluster")
            .field("bind", &self.config.bind)
            .finish()
    }
}

impl Cluster {
    /// Builds the simulation with the configured users, nodes and datasets.
    pub fn boot(config: GatewayConfig) -> Result<Arc<Self>> {
        config
            .validate()
            .map_err(|e| Error::invalid(e.to_string()))?;
        let replicas = if config.sim.standby { 2 } else { 1 };
        let logs = match &config.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(mlcluster_core::log::LogError::from)?;
                (0..replicas)
                    .map(|i| EventLog::open(dir.join(format!("replica-{i}.log"))))
                    .collect::<Result<Vec<_>, _>>()?
            }
            None => (0..replicas).map(|_| EventLog::in_memory()).collect(),
        };
        let mut sim = Simulation::with_logs(config.sim.clone(), logs)?;
        for u in &config.users {
            let account = u.clone();
            sim.command(|p| p.ensure_user(account))?;
        }
        for n in &config.nodes {
            sim.spawn_node(Some(n.node_id.clone()), n.gpus, n.memory)?;
        }
        for d in &config.datasets {
            let push = d.push.clone();
            let exists = sim
                .primary()?
                .state()
                .datasets
                .contains_key(&push.dataset_id);
            if !exists {
                sim.command(|p| p.push_dataset(&d.owner, push))?;
            }
        }
        let mut dispatcher = Dispatcher::new(config.notify.max_attempts.max(1));
        if let Some(path) = &config.notify.file {
            dispatcher = dispatcher.with_sink(FileSink::new(path));
        }
        if let Some(url) = &config.notify.webhook {
            dispatcher = dispatcher.with_sink(WebhookSink::new(url.clone()));
        }
        Ok(Arc::new(Self {
            config,
            sim: Mutex::new(sim),
            dispatcher: Mutex::new((dispatcher, 0)),
        }))
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn user_for_token(&self, token: &str) -> Option<UserId> {
        self.config.tokens.get(token).cloned()
    }

    fn lock(&self) -> MutexGuard<'_, Simulation> {
        self.sim.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Read access to the whole simulation.
    pub fn read<T>(&self, f: impl FnOnce(&Simulation) -> T) -> T {
        f(&self.lock())
    }

    /// Read access to the active primary.
    pub fn query<T>(&self, f: impl FnOnce(&ControlPlane) -> Result<T>) -> Result<T> {
        let sim = self.lock();
        f(sim.primary()?)
    }

    /// A mutation on the active primary, delivered like any client command.
    pub fn command<T>(&self, f: impl FnOnce(&mut ControlPlane) -> Result<T>) -> Result<T> {
        let out = self.lock().command(f);
        self.dispatch();
        out
    }

    pub fn now(&self) -> Millis {
        self.lock().now()
    }

    /// Moves virtual time forward by `by` and delivers new notifications.
    pub fn advance(&self, by: Millis) -> Result<Millis> {
        let now = {
            let mut sim = self.lock();
            let target = sim.now() + by;
            sim.run_until(target)?;
            sim.now()
        };
        self.dispatch();
        Ok(now)
    }

    pub fn inject_fault(&self, at: Millis, target: FaultTarget, kind: FaultKind) {
        self.lock().inject_fault(at, target, kind);
    }

    fn dispatch(&self) {
        let mut guard = self.dispatcher.lock().unwrap_or_else(|p| p.into_inner());
        let (dispatcher, sent) = &mut *guard;
        let fresh: Vec<Notification> = {
            let sim = self.lock();
            sim.stats().notifications[*sent..].to_vec()
        };
        if fresh.is_empty() {
            return;
        }
        *sent += fresh.len();
        dispatcher.dispatch(&fresh);
    }

    /// Notifications handed to sinks so far, and how many were dropped.
    pub fn delivery(&self) -> (usize, u64) {
        let guard = self.dispatcher.lock().unwrap_or_else(|p| p.into_inner());
        (guard.1, guard.0.dropped())
    }
}

/// Advances virtual time in proportion to wall time until stopped.
pub struct Driver {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Driver {
    /// Returns `None` when the clock is manual (speed 0).
    pub fn spawn(cluster: Arc<Cluster>) -> Option<Self> {
        let clock = cluster.config().clock.clone();
        if clock.speed == 0.0 {
            return None;
        }
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::spawn(move || {
            let started = Instant::now();
            let origin = cluster.now();
            while !flag.load(Ordering::Relaxed) {
                std::thread::sleep(Duration::from_millis(clock.step_ms));
                let target =
                    origin + (started.elapsed().as_secs_f64() * 1e3 * clock.speed) as Millis;
                let now = cluster.now();
                if target > now {
                    if let Err(e) = cluster.advance(target - now) {
                        tracing::error!(error = %e, "simulation step failed");
                    }
                }
            }
        });
        Some(Self {
            stop,
            thread: Some(thread),
        })
    }
}

impl Drop for Driver {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
