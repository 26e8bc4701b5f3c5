//! Sweep orchestration on the control plane, including PBT barriers.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::sweep::{exploit_explore, rank, Strategy, Sweep, SweepSpec, SweepTemplate};
use super::RunRequest;
use crate::control::{ControlPlane, Directive};
use crate::domain::{Config, SessionState};
use crate::error::{Error, RejectReason, Result};
use crate::event::Event;
use crate::ids::{NodeId, SessionId, SweepId, UserId};
use crate::session::sweep::PbtGeneration;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepLaunch {
    pub sweep_id: SweepId,
    pub sessions: Vec<SessionId>,
    pub rejected: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberStatus {
    pub session_id: SessionId,
    pub state: Option<SessionState>,
    pub progress_step: u64,
    pub config: Option<Config>,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepStatus {
    pub sweep: Sweep,
    pub members: Vec<MemberStatus>,
    pub best: Option<(SessionId, f64)>,
}

impl ControlPlane {
    /// Spawns the sweep's sessions. Spawning stops at credit exhaustion; each
    /// config left unspawned is counted as rejected.
    pub fn sweep(
        &mut self,
        user: &UserId,
        spec: SweepSpec,
        template: SweepTemplate,
    ) -> Result<SweepLaunch> {
        spec.validate()?;
        template.profile.validate()?;
        let configs = spec.initial_configs()?;
        if let Strategy::Pbt { population, .. } = spec.strategy {
            let cluster: u64 = self.state.nodes.values().map(|n| n.total_gpus as u64).sum();
            if population as u64 * template.gpus as u64 > cluster {
                return Err(Error::Rejected(RejectReason::Infeasible));
            }
        }
        let probe = crate::domain::ResourceRequest {
            gpus: template.gpus,
            memory: template.memory,
            dataset_id: template.dataset_id.clone(),
            image_id: template.image_id.clone(),
        };
        if let crate::scheduler::AdmissionDecision::Rejected { reason } =
            self.admit(user, &probe)?
        {
            if reason != RejectReason::CreditExhausted {
                return Err(Error::Rejected(reason));
            }
        }
        let sweep_id: SweepId = format!("sweep-{}", self.state.next_sweep + 1).into();
        let sweep = Sweep {
            sweep_id: sweep_id.clone(),
            owner: user.clone(),
            spec: spec.clone(),
            template: template.clone(),
            members: Vec::new(),
            rejected: 0,
            generations: Vec::new(),
            created_at: self.now(),
        };
        self.emit(Event::SweepCreated {
            sweep: Box::new(sweep),
        })?;
        let mut sessions = Vec::new();
        let mut rejected = 0;
        let total = configs.len();
        for (i, config) in configs.into_iter().enumerate() {
            let req = RunRequest {
                dataset_id: template.dataset_id.clone(),
                image_id: template.image_id.clone(),
                config,
                gpus: template.gpus,
                memory: template.memory,
                profile: template.profile.clone(),
                seed: Some(spec.member_seed(i)),
                team: template.team.clone(),
            };
            match self.create_session(user, req, None, 0, Some(sweep_id.clone())) {
                Ok(sid) => {
                    self.emit(Event::SweepMemberAdded {
                        sweep_id: sweep_id.clone(),
                        session_id: sid.clone(),
                    })?;
                    sessions.push(sid);
                }
                Err(Error::Rejected(RejectReason::CreditExhausted)) => {
                    for _ in i..total {
                        self.emit(Event::SweepSpawnRejected {
                            sweep_id: sweep_id.clone(),
                        })?;
                        rejected += 1;
                    }
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(SweepLaunch {
            sweep_id,
            sessions,
            rejected,
        })
    }

    fn member_score(&self, sid: &SessionId, metric: &str, at_step: Option<u64>) -> Option<f64> {
        self.state
            .metrics
            .get(sid)?
            .iter()
            .rev()
            .find(|p| p.name == metric && at_step.is_none_or(|s| p.step == s))
            .map(|p| p.value)
    }

    pub fn sweep_status(&self, user: &UserId, id: &SweepId) -> Result<SweepStatus> {
        let sweep = self
            .state
            .sweeps
            .get(id)
            .ok_or_else(|| Error::not_found("sweep", id))?;
        let account = self.state.user(user)?;
        if &sweep.owner != user && !account.is_admin() {
            return Err(Error::PermissionDenied(format!("{user} does not own {id}")));
        }
        let metric = &sweep.spec.objective.metric;
        let members: Vec<MemberStatus> = sweep
            .members
            .iter()
            .map(|sid| {
                let s = self.state.sessions.get(sid);
                MemberStatus {
                    session_id: sid.clone(),
                    state: s.map(|s| s.state),
                    progress_step: s.map_or(0, |s| s.progress_step),
                    config: s.map(|s| s.config.clone()),
                    score: self.member_score(sid, metric, None),
                }
            })
            .collect();
        let scored: Vec<(SessionId, f64)> = members
            .iter()
            .filter_map(|m| m.score.map(|v| (m.session_id.clone(), v)))
            .collect();
        let best = rank(&scored, sweep.spec.objective.order).into_iter().next();
        Ok(SweepStatus {
            sweep: sweep.clone(),
            members,
            best,
        })
    }

    /// The member with the best latest objective value.
    pub fn sweep_best(&self, user: &UserId, id: &SweepId) -> Result<Option<(SessionId, f64)>> {
        Ok(self.sweep_status(user, id)?.best)
    }

    /// A PBT member finished `step` and is waiting for the rest of its population.
    pub fn on_barrier(&mut self, sid: &SessionId, node_id: &NodeId, step: u64) -> Result<bool> {
        let Some(session) = self.state.sessions.get(sid) else {
            return Ok(false);
        };
        if session.state != SessionState::Running
            || session.node_id.as_ref() != Some(node_id)
            || session.progress_step != step
        {
            return Ok(false);
        }
        let Some(sweep_id) = session.sweep.clone() else {
            return Ok(false);
        };
        self.barriers
            .entry(sweep_id.clone())
            .or_default()
            .insert(sid.clone(), step);
        self.check_barrier(&sweep_id)?;
        Ok(true)
    }

    /// Runs an exploit/explore generation once every live member is waiting at
    /// the same step.
    pub(crate) fn check_barrier(&mut self, sweep_id: &SweepId) -> Result<bool> {
        let Some(sweep) = self.state.sweeps.get(sweep_id) else {
            return Ok(false);
        };
        let live: BTreeSet<SessionId> = sweep
            .members
            .iter()
            .filter(|m| {
                self.state
                    .sessions
                    .get(*m)
                    .is_some_and(|s| !s.state.is_terminal())
            })
            .cloned()
            .collect();
        let waiting = self.barriers.entry(sweep_id.clone()).or_default();
        waiting.retain(|m, _| live.contains(m));
        if live.is_empty() || waiting.len() != live.len() {
            return Ok(false);
        }
        let steps: BTreeSet<u64> = waiting.values().copied().collect();
        if steps.len() != 1 {
            return Ok(false);
        }
        let step = *steps.iter().next().expect("one step");
        let waiting = std::mem::take(waiting);
        let spec = sweep.spec.clone();
        let index = sweep.generations.len() as u32;
        let scores: Vec<(SessionId, f64)> = waiting
            .keys()
            .map(|m| {
                let v = self
                    .member_score(m, &spec.objective.metric, Some(step))
                    .unwrap_or(f64::NAN);
                (m.clone(), v)
            })
            .collect();
        let ranking = rank(&scores, spec.objective.order);
        let configs: BTreeMap<SessionId, Config> = waiting
            .keys()
            .filter_map(|m| {
                self.state
                    .sessions
                    .get(m)
                    .map(|s| (m.clone(), s.config.clone()))
            })
            .collect();
        let replacements = exploit_explore(&spec, &ranking, &configs, index);
        let mut new_configs: BTreeMap<SessionId, Config> = BTreeMap::new();
        for r in &replacements {
            let Some(src) = self.state.latest_checkpoint(&r.source).cloned() else {
                continue;
            };
            self.emit(Event::Reconfigured {
                session_id: r.member.clone(),
                config: r.config.clone(),
                source: r.source.clone(),
            })?;
            self.push_checkpoint(&r.member, step, src.digest, src.value)?;
            new_configs.insert(r.member.clone(), r.config.clone());
        }
        self.emit(Event::PbtGenerationCompleted {
            sweep_id: sweep_id.clone(),
            generation: PbtGeneration {
                index,
                step,
                ranking,
                replacements,
            },
        })?;
        for member in waiting.keys() {
            let Some(node_id) = self
                .state
                .sessions
                .get(member)
                .and_then(|s| s.node_id.clone())
            else {
                continue;
            };
            self.directives.push(Directive::Continue {
                session_id: member.clone(),
                node_id,
                epoch: self.state.epoch,
                config: new_configs.remove(member),
            });
        }
        Ok(true)
    }

    /// Re-evaluates every sweep with waiting members (a member may have ended).
    pub(crate) fn check_barriers(&mut self) -> Result<()> {
        let ids: Vec<SweepId> = self
            .barriers
            .iter()
            .filter(|(_, w)| !w.is_empty())
            .map(|(id, _)| id.clone())
            .collect();
        for id in ids {
            self.check_barrier(&id)?;
        }
        Ok(())
    }
}
