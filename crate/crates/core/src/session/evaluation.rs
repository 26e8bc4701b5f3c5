//! Hidden evaluation for submissions and the deterministic inference stub.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Checkpoint, ScoreOrder};
use crate::ids::DatasetId;

/// Half-width of the dataset-keyed perturbation applied to scores.
pub const SCORE_JITTER: f64 = 0.005;

fn unit_from_hash(bytes: &[u8]) -> f64 {
    let mut word = [0u8; 8];
    word.copy_from_slice(&bytes[..8]);
    (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64
}

/// Held-out score of a checkpoint on a dataset.
///
/// A monotone transform of the checkpoint's converged metric value plus a
/// small perturbation keyed by (dataset, digest): accuracy-like metrics report
/// the value itself, error-like metrics report its complement.
pub fn score(dataset: &DatasetId, checkpoint: &Checkpoint, order: ScoreOrder) -> f64 {
    let mut h = Sha256::new();
    h.update(dataset.as_str().as_bytes());
    h.update([0]);
    h.update(checkpoint.digest.as_bytes());
    let jitter = (unit_from_hash(&h.finalize()) * 2.0 - 1.0) * SCORE_JITTER;
    match order {
        ScoreOrder::Descending => checkpoint.value + jitter,
        ScoreOrder::Ascending => (1.0 - checkpoint.value + jitter).max(0.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    pub label: usize,
    pub probabilities: Vec<f64>,
    pub model_digest: String,
}

pub const INFERENCE_CLASSES: usize = 10;

/// Deterministic "model output" for a payload: a softmax over logits derived
/// from the checkpoint digest and the canonical payload bytes.
pub fn infer(digest: &str, payload: &serde_json::Value) -> InferenceOutput {
    let mut h = Sha256::new();
    h.update(digest.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(payload).expect("json value serializes"));
    let bytes = h.finalize();
    let logits: Vec<f64> = bytes
        .iter()
        .take(INFERENCE_CLASSES)
        .map(|b| *b as f64 / 32.0)
        .collect();
    let max = logits.iter().cloned().fold(f64::MIN, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probabilities: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let label = probabilities
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(i, _)| i);
    InferenceOutput {
        label,
        probabilities,
        model_digest: digest.to_owned(),
    }
}
