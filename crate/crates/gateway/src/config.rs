//! Gateway configuration: a TOML file plus `key.path=value` overrides.

use std::collections::BTreeMap;
use std::path::PathBuf;

use mlcluster_core::domain::UserAccount;
use mlcluster_core::ids::UserId;
use mlcluster_core::sim::scenario::{DatasetSpec, NodeSpec};
use mlcluster_core::sim::SimConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad config: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("cannot encode config: {0}")]
    Encode(#[from] toml::ser::Error),

    #[error("bad override `{raw}`: {reason}")]
    Override { raw: String, reason: String },

    #[error("invalid config: {0}")]
    Invalid(String),
}

/// How virtual time advances while the server runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockConfig {
    /// Virtual milliseconds per wall-clock millisecond; 0 means time only
    /// moves through the admin advance endpoint.
    pub speed: f64,
    /// Wall-clock milliseconds between driver steps.
    pub step_ms: u64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self {
            speed: 10.0,
            step_ms: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NotifyConfig {
    /// Append notifications here as JSON lines.
    pub file: Option<PathBuf>,
    /// POST each notification here as JSON.
    pub webhook: Option<String>,
    pub max_attempts: u32,
}

impl Default for NotifyConfig {
    fn default() -> Self {
        Self {
            file: None,
            webhook: None,
            max_attempts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub bind: String,
    /// Bearer token to user.
    pub tokens: BTreeMap<String, UserId>,
    pub users: Vec<UserAccount>,
    pub nodes: Vec<NodeSpec>,
    pub datasets: Vec<DatasetSpec>,
    pub sim: SimConfig,
    pub clock: ClockConfig,
    pub notify: NotifyConfig,
    /// Keep replica logs here instead of in memory.
    pub data_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8470".into(),
            tokens: BTreeMap::new(),
            users: Vec::new(),
            nodes: Vec::new(),
            datasets: Vec::new(),
            sim: SimConfig::default(),
            clock: ClockConfig::default(),
            notify: NotifyConfig::default(),
            data_dir: None,
        }
    }
}

impl GatewayConfig {
    pub fn parse(raw: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(raw)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sim
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.clock.speed >= 0.0 && self.clock.speed.is_finite()) {
            return Err(ConfigError::Invalid(
                "clock.speed must be finite and >= 0".into(),
            ));
        }
        if self.clock.step_ms == 0 {
            return Err(ConfigError::Invalid(
                "clock.step_ms must be positive".into(),
            ));
        }
        for (token, user) in &self.tokens {
            if token.is_empty() {
                return Err(ConfigError::Invalid(format!("empty token for {user}")));
            }
            if !self.users.iter().any(|u| &u.user_id == user) {
                return Err(ConfigError::Invalid(format!(
                    "token for unknown user {user}"
                )));
            }
        }
        Ok(())
    }

    /// Applies `a.b.c=value`. The value is read as a TOML literal, falling
    /// back to a bare string.
    pub fn apply_override(&mut self, raw: &str) -> Result<(), ConfigError> {
        let (path, value) = parse_override(raw)?;
        let mut root = toml::Table::try_from(&*self)?;
        let mut table = &mut root;
        for key in &path[..path.len() - 1] {
            let entry = table
                .entry(key.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry.as_table_mut().ok_or_else(|| ConfigError::Override {
                raw: raw.into(),
                reason: format!("`{key}` is not a table"),
            })?;
        }
        table.insert(path[path.len() - 1].clone(), value);
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Override {
                raw: raw.into(),
                reason: e.message().to_owned(),
            })?;
        Ok(())
    }
}

/// Splits `a.b.c=value` into its key path and TOML value.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, toml::Value), ConfigError> {
    let bad = |reason: &str| ConfigError::Override {
        raw: raw.into(),
        reason: reason.into(),
    };
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| bad("expected key=value"))?;
    let path: Vec<String> = key.trim().split('.').map(|k| k.trim().to_owned()).collect();
    if path.iter().any(|k| {
        k.is_empty()
            || !k
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
    }) {
        return Err(bad("keys are dot-separated [A-Za-z0-9_-] names"));
    }
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()));
    Ok((path, parsed))
}
