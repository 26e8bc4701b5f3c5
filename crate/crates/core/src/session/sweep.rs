//! Hyperparameter sweeps: grid, seeded random search and synchronous
//! population-based training.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::domain::{Config, ConfigValue, ScoreOrder, WorkloadProfile};
use crate::error::{Error, Result};
use crate::ids::{DatasetId, ImageId, SessionId, SweepId, TeamId, UserId};
use crate::sim::rng::mix64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Grid,
    Random {
        n: u32,
    },
    Pbt {
        population: u32,
        truncation_fraction: f64,
        #[serde(default = "default_perturb_factors")]
        perturb_factors: Vec<f64>,
    },
}

fn default_perturb_factors() -> Vec<f64> {
    vec![0.8, 1.2]
}

/// Candidate values for one hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamSpace {
    Values(Vec<ConfigValue>),
    Range {
        min: f64,
        max: f64,
        #[serde(default)]
        log: bool,
        #[serde(default)]
        integer: bool,
    },
}

impl ParamSpace {
    fn sample(&self, rng: &mut ChaCha8Rng) -> ConfigValue {
        match self {
            ParamSpace::Values(values) => values[rng.gen_range(0..values.len())].clone(),
            ParamSpace::Range {
                min,
                max,
                log,
                integer,
            } => {
                let u: f64 = rng.gen();
                let v = if *log {
                    (min.ln() + u * (max.ln() - min.ln())).exp()
                } else {
                    min + u * (max - min)
                };
                if *integer {
                    ConfigValue::Int(v.round() as i64)
                } else {
                    ConfigValue::Float(v)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub metric: String,
    pub order: ScoreOrder,
}

impl Default for Objective {
    fn default() -> Self {
        Self {
            metric: "acc".into(),
            order: ScoreOrder::Descending,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub strategy: Strategy,
    #[serde(default)]
    pub base_config: Config,
    pub space: BTreeMap<String, ParamSpace>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub objective: Objective,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.space.is_empty() {
            return Err(Error::invalid("sweep space is empty"));
        }
        for (name, space) in &self.space {
            match space {
                ParamSpace::Values(v) if v.is_empty() => {
                    return Err(Error::invalid(format!("no values for `{name}`")));
                }
                ParamSpace::Values(v) if !v.iter().all(ConfigValue::is_finite) => {
                    return Err(Error::invalid(format!("non-finite value for `{name}`")));
                }
                ParamSpace::Range { min, max, log, .. } => {
                    if !(min.is_finite() && max.is_finite() && min <= max) {
                        return Err(Error::invalid(format!("bad range for `{name}`")));
                    }
                    if *log && *min <= 0.0 {
                        return Err(Error::invalid(format!(
                            "log range for `{name}` must be positive"
                        )));
                    }
                    if matches!(self.strategy, Strategy::Grid) {
                        return Err(Error::invalid(format!(
                            "grid search needs a finite list for `{name}`"
                        )));
                    }
                }
                ParamSpace::Values(_) => {}
            }
        }
        match &self.strategy {
            Strategy::Grid => {}
            Strategy::Random { n } => {
                if *n == 0 {
                    return Err(Error::invalid("random search needs n >= 1"));
                }
            }
            Strategy::Pbt {
                population,
                truncation_fraction,
                perturb_factors,
            } => {
                if *population < 2 {
                    return Err(Error::invalid("PBT population must be at least 2"));
                }
                if !(*truncation_fraction > 0.0 && *truncation_fraction <= 0.5) {
                    return Err(Error::invalid("truncation fraction must lie in (0, 0.5]"));
                }
                if perturb_factors.is_empty()
                    || perturb_factors.iter().any(|f| !(f.is_finite() && *f > 0.0))
                {
                    return Err(Error::invalid("perturb factors must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Cartesian product in parameter-name order, last parameter varying fastest.
    pub fn grid_configs(&self) -> Result<Vec<Config>> {
        let mut configs = vec![self.base_config.clone()];
        for (name, space) in &self.space {
            let ParamSpace::Values(values) = space else {
                return Err(Error::invalid(format!("`{name}` is not a finite list")));
            };
            configs = configs
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.insert(name.clone(), v.clone());
                        c
                    })
                })
                .collect();
        }
        Ok(configs)
    }

    /// `n` configurations drawn with the sweep seed.
    pub fn random_configs(&self, n: u32) -> Vec<Config> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..n)
            .map(|_| {
                let mut c = self.base_config.clone();
                for (name, space) in &self.space {
                    c.insert(name.clone(), space.sample(&mut rng));
                }
                c
            })
            .collect()
    }

    /// Configurations for the sessions spawned at sweep start.
    pub fn initial_configs(&self) -> Result<Vec<Config>> {
        self.validate()?;
        Ok(match &self.strategy {
            Strategy::Grid => self.grid_configs()?,
            Strategy::Random { n } => self.random_configs(*n),
            Strategy::Pbt { population, .. } => self.random_configs(*population),
        })
    }

    pub fn member_seed(&self, index: usize) -> u64 {
        mix64(self.seed ^ mix64(index as u64 + 1))
    }

    /// Steps between PBT exploit/explore rounds: a tenth of the run.
    pub fn pbt_interval(profile: &WorkloadProfile) -> u64 {
        (profile.steps_total / 10).max(1)
    }
}

/// Everything a sweep needs to spawn member sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTemplate {
    pub dataset_id: DatasetId,
    pub image_id: ImageId,
    pub gpus: u32,
    pub memory: u64,
    pub profile: WorkloadProfile,
    #[serde(default)]
    pub team: Option<TeamId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbtReplacement {
    pub member: SessionId,
    pub source: SessionId,
    pub factors: BTreeMap<String, f64>,
    pub config: Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbtGeneration {
    pub index: u32,
    pub step: u64,
    /// Best first.
    pub ranking: Vec<(SessionId, f64)>,
    pub replacements: Vec<PbtReplacement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub sweep_id: SweepId,
    pub owner: UserId,
    pub spec: SweepSpec,
    pub template: SweepTemplate,
    pub members: Vec<SessionId>,
    pub rejected: u32,
    pub generations: Vec<PbtGeneration>,
    pub created_at: Millis,
}

/// Number of members replaced (and of donors) per PBT round.
pub fn truncation_count(population: usize, fraction: f64) -> usize {
    ((population as f64 * fraction).floor() as usize).clamp(1, population / 2)
}

/// Ranks members best-first; ties go to the lower session id.
pub fn rank(scores: &[(SessionId, f64)], order: ScoreOrder) -> Vec<(SessionId, f64)> {
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| {
        let by_score = match order {
            ScoreOrder::Ascending => a.1.total_cmp(&b.1),
            ScoreOrder::Descending => b.1.total_cmp(&a.1),
        };
        by_score.then_with(|| a.0.cmp(&b.0))
    });
    ranked
}

/// One exploit/explore round: each of the bottom members copies a uniformly
/// chosen top member's config, then every tuned numeric parameter is scaled by
/// a factor drawn from `factors`.
pub fn exploit_explore(
    spec: &SweepSpec,
    ranking: &[(SessionId, f64)],
    configs: &BTreeMap<SessionId, Config>,
    generation: u32,
) -> Vec<PbtReplacement> {
    let Strategy::Pbt {
        truncation_fraction,
        perturb_factors,
        ..
    } = &spec.strategy
    else {
        return Vec::new();
    };
    let count = truncation_count(ranking.len(), *truncation_fraction);
    if ranking.len() < 2 {
        return Vec::new();
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(mix64(spec.seed ^ mix64(0x5eed_0000 + generation as u64)));
    let top = &ranking[..count];
    let bottom = &ranking[ranking.len() - count..];
    bottom
        .iter()
        .map(|(member, _)| {
            let source = &top[rng.gen_range(0..top.len())].0;
            let mut config = configs.get(source).cloned().unwrap_or_default();
            let mut factors = BTreeMap::new();
            for name in spec.space.keys() {
                if let Some(value) = config.get(name).filter(|v| v.is_numeric()) {
                    let factor = perturb_factors[rng.gen_range(0..perturb_factors.len())];
                    let scaled = value.scaled(factor);
                    config.insert(name.clone(), scaled);
                    factors.insert(name.clone(), factor);
                }
            }
            PbtReplacement {
                member: member.clone(),
                source: source.clone(),
                factors,
                config,
            }
        })
        .collect()
}
