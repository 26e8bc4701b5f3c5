//! Scenario files: a fleet, accounts, datasets, workload templates, a job
//! trace and a fault schedule, run on a fresh [`Simulation`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{FaultKind, FaultTarget, SimConfig, Simulation};
use crate::clock::Millis;
use crate::domain::{Config, UserAccount, WorkloadProfile};
use crate::error::{Error, Result};
use crate::ids::{DatasetId, ImageId, NodeId, SessionId, TeamId, UserId};
use crate::registry::DatasetPush;
use crate::session::RunRequest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub node_id: NodeId,
    pub gpus: u32,
    pub memory: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub owner: UserId,
    #[serde(flatten)]
    pub push: DatasetPush,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    /// Submission time.
    #[serde(default)]
    pub at: Millis,
    pub user: UserId,
    pub dataset_id: DatasetId,
    pub image_id: ImageId,
    pub gpus: u32,
    pub memory: u64,
    /// Key into the scenario's workload templates.
    pub workload: String,
    #[serde(default)]
    pub config: Config,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub team: Option<TeamId>,
    /// Submit this many identical jobs.
    #[serde(default = "one")]
    pub count: u32,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub at: Millis,
    pub target: FaultTarget,
    #[serde(flatten)]
    pub kind: FaultKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub config: SimConfig,
    #[serde(default)]
    pub users: Vec<UserAccount>,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub datasets: Vec<DatasetSpec>,
    #[serde(default)]
    pub workloads: BTreeMap<String, WorkloadProfile>,
    #[serde(default)]
    pub jobs: Vec<JobSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    /// Stop here even if work remains.
    pub until: Millis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub index: usize,
    pub session_id: Option<SessionId>,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct ScenarioRun {
    pub sim: Simulation,
    pub jobs: Vec<JobResult>,
    /// Whether every session ended before `until`.
    pub idle: bool,
}

impl Scenario {
    pub fn parse(raw: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(raw)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.nodes.is_empty() {
            return Err(Error::invalid("a scenario needs at least one node"));
        }
        for (name, w) in &self.workloads {
            w.validate()
                .map_err(|e| Error::invalid(format!("workload {name}: {e}")))?;
        }
        for (i, job) in self.jobs.iter().enumerate() {
            if !self.workloads.contains_key(&job.workload) {
                return Err(Error::invalid(format!(
                    "job {i} names unknown workload {}",
                    job.workload
                )));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Simulation> {
        self.validate()?;
        let mut sim = Simulation::new(self.config.clone())?;
        for u in &self.users {
            let account = u.clone();
            sim.command(|p| p.ensure_user(account))?;
        }
        for n in &self.nodes {
            sim.spawn_node(Some(n.node_id.clone()), n.gpus, n.memory)?;
        }
        for d in &self.datasets {
            let push = d.push.clone();
            sim.command(|p| p.push_dataset(&d.owner, push))?;
        }
        for f in &self.faults {
            sim.inject_fault(f.at, f.target.clone(), f.kind.clone());
        }
        Ok(sim)
    }

    /// Runs the trace. Rejected submissions are recorded, not fatal.
    pub fn run(&self) -> Result<ScenarioRun> {
        let mut sim = self.build()?;
        let mut order: Vec<(usize, &JobSpec)> = self.jobs.iter().enumerate().collect();
        order.sort_by_key(|(i, j)| (j.at, *i));
        let mut jobs = Vec::new();
        for (index, job) in order {
            sim.run_until(job.at.max(sim.now()))?;
            for _ in 0..job.count {
                let req = RunRequest {
                    dataset_id: job.dataset_id.clone(),
                    image_id: job.image_id.clone(),
                    config: job.config.clone(),
                    gpus: job.gpus,
                    memory: job.memory,
                    profile: self.workloads[&job.workload].clone(),
                    seed: job.seed,
                    team: job.team.clone(),
                };
                let result = match sim.command(|p| p.run(&job.user, req)) {
                    Ok(sid) => JobResult {
                        index,
                        session_id: Some(sid),
                        error: None,
                    },
                    Err(e) => JobResult {
                        index,
                        session_id: None,
                        error: Some(e.to_string()),
                    },
                };
                jobs.push(result);
            }
        }
        let idle = sim.run_until_idle(self.until)?;
        Ok(ScenarioRun { sim, jobs, idle })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"{
        "users": [{"user_id": "alice", "role": "user", "credit_balance": 1000000}],
        "nodes": [{"node_id": "n1", "gpus": 2, "memory": 68719476736}],
        "datasets": [{"owner": "alice", "dataset_id": "mnist", "size": 1073741824}],
        "workloads": {"tiny": {"curve": {"asymptote": 0.9, "rate": 0.2}, "steps_total": 5, "peak_memory": 1073741824}},
        "jobs": [{"user": "alice", "dataset_id": "mnist", "image_id": "torch", "gpus": 1, "memory": 4294967296, "workload": "tiny", "count": 2}],
        "until": 60000
    }"#;

    #[test]
    fn small_scenario_completes() {
        let scenario = Scenario::parse(SMALL.as_bytes()).unwrap();
        let run = scenario.run().unwrap();
        assert!(run.idle);
        assert_eq!(run.jobs.len(), 2);
        for s in run.sim.sessions().unwrap() {
            assert_eq!(s.state, crate::domain::SessionState::Done);
            assert_eq!(s.progress_step, 5);
        }
        run.sim.audit().unwrap();
    }

    #[test]
    fn unknown_workload_is_invalid() {
        let mut scenario = Scenario::parse(SMALL.as_bytes()).unwrap();
        scenario.jobs[0].workload = "huge".into();
        assert!(scenario.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let raw = SMALL.replace("\"until\"", "\"untill\"");
        assert!(Scenario::parse(raw.as_bytes()).is_err());
    }

    #[test]
    fn fault_schedule_parses() {
        let raw = SMALL.replace(
            "\"until\"",
            r#""faults": [{"at": 2000, "target": "primary", "kind": "crash"},
                          {"at": 1000, "target": {"node": "n1"}, "kind": "network_delay", "duration": 1500}],
               "until""#,
        );
        let scenario = Scenario::parse(raw.as_bytes()).unwrap();
        assert_eq!(scenario.faults[0].kind, FaultKind::Crash);
        assert_eq!(
            scenario.faults[1].kind,
            FaultKind::NetworkDelay { duration: 1500 }
        );
    }
}
