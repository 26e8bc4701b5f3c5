use serde::{Deserialize, Serialize};

use crate::clock::{Millis, SECOND};
use crate::error::{Error, Result};

/// Saturating learning curve `asymptote * (1 - exp(-rate * step))` plus noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub asymptote: f64,
    pub rate: f64,
    #[serde(default)]
    pub noise_sigma: f64,
}

/// How a hyperparameter moves the curve's asymptote: the asymptote is scaled
/// by `exp(-(ln(value / optimum) / width)^2)`, so it peaks at `optimum`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamResponse {
    pub param: String,
    pub optimum: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilizationSeries {
    Constant {
        pct: f64,
    },
    /// Repeats the listed values, indexed by step.
    Cycle {
        pcts: Vec<f64>,
    },
}

impl Default for UtilizationSeries {
    fn default() -> Self {
        UtilizationSeries::Constant { pct: 90.0 }
    }
}

impl UtilizationSeries {
    pub fn at(&self, step: u64) -> f64 {
        match self {
            UtilizationSeries::Constant { pct } => *pct,
            UtilizationSeries::Cycle { pcts } if pcts.is_empty() => 0.0,
            UtilizationSeries::Cycle { pcts } => pcts[(step % pcts.len() as u64) as usize],
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |p: &f64| (0.0..=100.0).contains(p);
        let valid = match self {
            UtilizationSeries::Constant { pct } => ok(pct),
            UtilizationSeries::Cycle { pcts } => !pcts.is_empty() && pcts.iter().all(ok),
        };
        if valid {
            Ok(())
        } else {
            Err(Error::invalid("GPU utilization series must lie in 0..=100"))
        }
    }
}

/// A deterministic synthetic training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub curve: LearningCurve,
    pub steps_total: u64,
    #[serde(default = "default_step_duration")]
    pub step_duration: Millis,
    pub peak_memory: u64,
    /// Memory used before `peak_step`; defaults to half the peak.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_memory: Option<u64>,
    /// First step at which usage reaches `peak_memory`; defaults to the midpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_step: Option<u64>,
    #[serde(default)]
    pub gpu_utilization: UtilizationSeries,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure_at: Option<u64>,
    /// Checkpoint cadence in steps; defaults to a tenth of the run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub response: Vec<ParamResponse>,
}

fn default_step_duration() -> Millis {
    SECOND
}

impl WorkloadProfile {
    pub fn simple(asymptote: f64, rate: f64, steps_total: u64, peak_memory: u64) -> Self {
        Self {
            curve: LearningCurve {
                asymptote,
                rate,
                noise_sigma: 0.0,
            },
            steps_total,
            step_duration: SECOND,
            peak_memory,
            base_memory: None,
            peak_step: None,
            gpu_utilization: UtilizationSeries::default(),
            failure_at: None,
            checkpoint_every: None,
            response: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.curve;
        if !(c.asymptote > 0.0 && c.asymptote <= 1.0) {
            return Err(Error::invalid("curve asymptote must lie in (0, 1]"));
        }
        if !(c.rate > 0.0 && c.rate.is_finite()) {
            return Err(Error::invalid("curve rate must be positive"));
        }
        if !(c.noise_sigma >= 0.0 && c.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        if self.steps_total == 0 {
            return Err(Error::invalid("steps_total must be at least 1"));
        }
        if self.step_duration == 0 {
            return Err(Error::invalid("step_duration must be positive"));
        }
        if self.peak_memory == 0 {
            return Err(Error::invalid("peak_memory must be positive"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::invalid("checkpoint_every must be positive"));
        }
        for r in &self.response {
            if !(r.optimum > 0.0 && r.width > 0.0) {
                return Err(Error::invalid(format!(
                    "response for `{}` needs positive optimum and width",
                    r.param
                )));
            }
        }
        self.gpu_utilization.validate()
    }

    pub fn checkpoint_interval(&self) -> u64 {
        self.checkpoint_every
            .unwrap_or(self.steps_total / 10)
            .max(1)
    }

    pub fn peak_step(&self) -> u64 {
        self.peak_step.unwrap_or(self.steps_total / 2).max(1)
    }

    pub fn base_memory(&self) -> u64 {
        self.base_memory
            .unwrap_or(self.peak_memory / 2)
            .min(self.peak_memory)
    }

    /// Modeled memory in use while executing `step` (1-based).
    pub fn memory_at(&self, step: u64) -> u64 {
        if step >= self.peak_step() {
            self.peak_memory
        } else {
            self.base_memory()
        }
    }

    /// First step whose modeled usage exceeds `allocation`, if any.
    pub fn first_exceeding_step(&self, allocation: u64) -> Option<u64> {
        if self.peak_memory <= allocation {
            return None;
        }
        if self.base_memory() > allocation {
            Some(1)
        } else {
            Some(self.peak_step().min(self.steps_total).max(1))
        }
    }
}
