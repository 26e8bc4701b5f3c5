//! Plot-ready exports, checkpoint manifests and session backup bundles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{Checkpoint, Memo, MetricEvent, Session};
use crate::ids::SessionId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(u64, f64)>,
}

/// Groups metric events into one series per name.
pub fn series(events: &[MetricEvent]) -> Vec<Series> {
    let mut by_name: BTreeMap<&str, Vec<(u64, f64)>> = BTreeMap::new();
    for e in events {
        by_name.entry(&e.name).or_default().push((e.step, e.value));
    }
    by_name
        .into_iter()
        .map(|(name, points)| Series {
            name: name.to_owned(),
            points,
        })
        .collect()
}

/// A fixed-size character chart of one series; `*` marks each column's value.
pub fn ascii_chart(series: &Series, width: usize, height: usize) -> String {
    let (width, height) = (width.max(2), height.max(2));
    if series.points.is_empty() {
        return format!("{}: no data\n", series.name);
    }
    let lo = series
        .points
        .iter()
        .map(|p| p.1)
        .fold(f64::INFINITY, f64::min);
    let hi = series
        .points
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut grid = vec![vec![' '; width]; height];
    let n = series.points.len();
    for col in 0..width {
        let idx = if n == 1 {
            0
        } else {
            col * (n - 1) / (width - 1)
        };
        let v = series.points[idx].1;
        let row = ((hi - v) / span * (height - 1) as f64).round() as usize;
        grid[row.min(height - 1)][col] = '*';
    }
    let mut out = format!(
        "{} (steps {}..{})\n",
        series.name,
        series.points[0].0,
        series.points[n - 1].0
    );
    for (i, row) in grid.iter().enumerate() {
        let label = if i == 0 {
            hi
        } else if i == height - 1 {
            lo
        } else {
            f64::NAN
        };
        let label = if label.is_nan() {
            " ".repeat(9)
        } else {
            format!("{label:>9.4}")
        };
        out.push_str(&label);
        out.push_str(" |");
        out.extend(row.iter());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub session_id: SessionId,
    pub checkpoints: Vec<Checkpoint>,
}

/// Everything needed to inspect or reproduce a session offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionBundle {
    pub session: Session,
    pub events: Vec<MetricEvent>,
    pub checkpoints: CheckpointManifest,
    pub memos: Vec<Memo>,
}

impl SessionBundle {
    /// Bundle contents as `(relative path, bytes)`, ready to archive.
    pub fn files(&self) -> Vec<(String, Vec<u8>)> {
        vec![
            ("session.json".into(), pretty(&self.session)),
            ("config.json".into(), pretty(&self.session.config)),
            ("checkpoints.json".into(), pretty(&self.checkpoints)),
            ("memos.json".into(), pretty(&self.memos)),
            (
                "events.jsonl".into(),
                self.events
                    .iter()
                    .flat_map(|e| {
                        let mut line = serde_json::to_vec(e).expect("event serializes");
                        line.push(b'\n');
                        line
                    })
                    .collect(),
            ),
        ]
    }
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("value serializes");
    v.push(b'\n');
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(step: u64, name: &str, value: f64) -> MetricEvent {
        MetricEvent {
            session_id: "u/d/1".into(),
            step,
            name: name.into(),
            value,
            timestamp: step,
        }
    }

    #[test]
    fn series_group_by_name() {
        let s = series(&[ev(1, "acc", 0.1), ev(1, "loss", 0.9), ev(2, "acc", 0.2)]);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].name, "acc");
        assert_eq!(s[0].points, vec![(1, 0.1), (2, 0.2)]);
    }

    #[test]
    fn chart_has_requested_height() {
        let s = &series(&[ev(1, "acc", 0.1), ev(2, "acc", 0.5), ev(3, "acc", 0.9)])[0];
        let chart = ascii_chart(s, 20, 5);
        assert_eq!(chart.lines().count(), 6);
        assert!(chart.lines().nth(1).unwrap().ends_with('*'));
        assert!(chart.lines().nth(5).unwrap().contains("|*"));
    }
}
