//! Synthetic training: metric streams, checkpoint digests and the memory model.

use sha2::{Digest, Sha256};

use super::rng::NoiseKey;
use crate::domain::{Config, WorkloadProfile};
use crate::ids::{DatasetId, ImageId};

/// The inputs that fully determine a metric stream.
#[derive(Debug, Clone)]
pub struct StreamKey<'a> {
    pub seed: u64,
    pub dataset_id: &'a DatasetId,
    pub image_id: &'a ImageId,
    pub config: &'a Config,
}

impl StreamKey<'_> {
    fn noise(&self) -> NoiseKey {
        NoiseKey::new(
            self.seed,
            &[self.dataset_id.as_str(), self.image_id.as_str()],
        )
    }
}

impl WorkloadProfile {
    /// Asymptote after applying the hyperparameter responses in `config`.
    pub fn effective_asymptote(&self, config: &Config) -> f64 {
        self.response.iter().fold(self.curve.asymptote, |acc, r| {
            match config.get(&r.param).and_then(|v| v.as_f64()) {
                Some(v) if v > 0.0 => {
                    let d = (v / r.optimum).ln() / r.width;
                    acc * (-d * d).exp()
                }
                Some(_) => 0.0,
                None => acc,
            }
        })
    }

    /// Curve value at `step` without noise.
    pub fn clean_value(&self, config: &Config, step: u64) -> f64 {
        self.effective_asymptote(config) * (1.0 - (-self.curve.rate * step as f64).exp())
    }

    /// The `acc` metric at `step`: clean curve plus deterministic noise.
    pub fn metric_value(&self, key: &StreamKey<'_>, step: u64) -> f64 {
        let clean = self.clean_value(key.config, step);
        if self.curve.noise_sigma == 0.0 {
            clean
        } else {
            clean + self.curve.noise_sigma * key.noise().standard_normal(step)
        }
    }

    /// Metrics emitted for one completed step, sorted by name.
    pub fn step_metrics(&self, key: &StreamKey<'_>, step: u64) -> Vec<(String, f64)> {
        let acc = self.metric_value(key, step);
        vec![("acc".to_owned(), acc), ("loss".to_owned(), 1.0 - acc)]
    }
}

/// Hex SHA-256 over the seed, the canonical config and the step.
pub fn checkpoint_digest(seed: u64, config: &Config, step: u64) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(step.to_le_bytes());
    hex::encode(h.finalize())
}
