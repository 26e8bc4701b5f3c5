use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::domain::{Config, ConfigValue};
use crate::ids::SessionId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub session_id: SessionId,
    /// One cell per column; `None` where the session lacks the parameter.
    pub values: Vec<Option<ConfigValue>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub common_args: Config,
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

/// Splits configs into parameters shared with identical values by every
/// session and a matrix of the rest.
pub fn compare(sessions: &[(SessionId, &Config)]) -> Comparison {
    let names: BTreeSet<&String> = sessions.iter().flat_map(|(_, c)| c.keys()).collect();
    let mut common_args = Config::new();
    let mut columns = Vec::new();
    for name in names {
        let first = sessions.first().and_then(|(_, c)| c.get(name));
        let shared = first.is_some() && sessions.iter().all(|(_, c)| c.get(name) == first);
        match (shared, first) {
            (true, Some(v)) => {
                common_args.insert(name.clone(), v.clone());
            }
            _ => columns.push(name.clone()),
        }
    }
    let rows = sessions
        .iter()
        .map(|(id, c)| ComparisonRow {
            session_id: id.clone(),
            values: columns.iter().map(|n| c.get(n).cloned()).collect(),
        })
        .collect();
    Comparison {
        common_args,
        columns,
        rows,
    }
}

impl Comparison {
    /// One `name: a | b | ...` line per exclusive parameter (`-` where absent).
    pub fn diff_lines(&self) -> Vec<String> {
        self.columns
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let cells: Vec<String> = self
                    .rows
                    .iter()
                    .map(|r| {
                        r.values[i]
                            .as_ref()
                            .map_or("-".to_owned(), |v| v.to_string())
                    })
                    .collect();
                format!("{name}: {}", cells.join(" | "))
            })
            .collect()
    }
}
