//! GPU telemetry storage and utilization aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clock::Millis;
use crate::domain::TelemetrySample;
use crate::error::{Error, Result};
use crate::ids::{NodeId, SessionId};

/// Utilization threshold for the over-80 ratio, in percent.
pub const HIGH_UTILIZATION: f64 = 80.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationSummary {
    /// Mean over GPUs of the fraction of samples attributed to a session.
    pub running_ratio: f64,
    /// Fraction of GPUs whose mean utilization in the window exceeds 80%.
    pub over80_ratio: f64,
    pub per_session_mean: BTreeMap<SessionId, f64>,
    pub gpus: usize,
    pub samples: usize,
    pub empty: bool,
}

/// Aggregates samples with `from <= timestamp < to`.
pub fn aggregate_utilization(
    samples: &[TelemetrySample],
    from: Millis,
    to: Millis,
) -> UtilizationSummary {
    #[derive(Default)]
    struct Gpu {
        n: u64,
        attributed: u64,
        util: f64,
    }
    let mut gpus: BTreeMap<(&NodeId, u32), Gpu> = BTreeMap::new();
    let mut sessions: BTreeMap<&SessionId, (f64, u64)> = BTreeMap::new();
    let mut count = 0;
    for s in samples
        .iter()
        .filter(|s| s.timestamp >= from && s.timestamp < to)
    {
        count += 1;
        let g = gpus.entry((&s.node_id, s.gpu_index)).or_default();
        g.n += 1;
        g.util += s.utilization_pct;
        if let Some(sid) = &s.session_id {
            g.attributed += 1;
            let e = sessions.entry(sid).or_default();
            e.0 += s.utilization_pct;
            e.1 += 1;
        }
    }
    if gpus.is_empty() {
        return UtilizationSummary {
            running_ratio: 0.0,
            over80_ratio: 0.0,
            per_session_mean: BTreeMap::new(),
            gpus: 0,
            samples: 0,
            empty: true,
        };
    }
    let total = gpus.len() as f64;
    let running = gpus
        .values()
        .map(|g| g.attributed as f64 / g.n as f64)
        .sum::<f64>()
        / total;
    let over80 = gpus
        .values()
        .filter(|g| g.util / g.n as f64 > HIGH_UTILIZATION)
        .count() as f64
        / total;
    UtilizationSummary {
        running_ratio: running,
        over80_ratio: over80,
        per_session_mean: sessions
            .into_iter()
            .map(|(sid, (sum, n))| (sid.clone(), sum / n as f64))
            .collect(),
        gpus: gpus.len(),
        samples: count,
        empty: false,
    }
}

/// Append-only sample store, ordered per GPU by timestamp.
#[derive(Debug, Clone, Default)]
pub struct TelemetryStore {
    samples: Vec<TelemetrySample>,
    last: BTreeMap<(NodeId, u32), Millis>,
}

impl TelemetryStore {
    pub fn record(&mut self, sample: TelemetrySample) -> Result<()> {
        sample.validate()?;
        let key = (sample.node_id.clone(), sample.gpu_index);
        if let Some(prev) = self.last.get(&key) {
            if sample.timestamp < *prev {
                return Err(Error::invalid(format!(
                    "telemetry for {}:{} went back in time",
                    sample.node_id, sample.gpu_index
                )));
            }
        }
        self.last.insert(key, sample.timestamp);
        self.samples.push(sample);
        Ok(())
    }

    pub fn samples(&self) -> &[TelemetrySample] {
        &self.samples
    }

    pub fn for_session(&self, sid: &SessionId) -> Vec<TelemetrySample> {
        self.samples
            .iter()
            .filter(|s| s.session_id.as_ref() == Some(sid))
            .cloned()
            .collect()
    }

    pub fn for_node(&self, node: &NodeId) -> Vec<TelemetrySample> {
        self.samples
            .iter()
            .filter(|s| &s.node_id == node)
            .cloned()
            .collect()
    }

    /// Latest sample per GPU.
    pub fn latest(&self) -> Vec<TelemetrySample> {
        let mut out: BTreeMap<(&NodeId, u32), &TelemetrySample> = BTreeMap::new();
        for s in &self.samples {
            out.insert((&s.node_id, s.gpu_index), s);
        }
        out.into_values().cloned().collect()
    }

    pub fn aggregate(&self, from: Millis, to: Millis) -> UtilizationSummary {
        aggregate_utilization(&self.samples, from, to)
    }

    /// One JSON object per line.
    pub fn export_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }
}
