use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A hyperparameter value: number, flag or free-form string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ConfigValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

/// Hyperparameters keyed by name, iterated in name order.
pub type Config = BTreeMap<String, ConfigValue>;

impl ConfigValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ConfigValue::Int(v) => Some(*v as f64),
            ConfigValue::Float(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, ConfigValue::Int(_) | ConfigValue::Float(_))
    }

    /// Multiplies a numeric value, keeping integers integral (and at least 1
    /// when they started positive). Non-numeric values are returned unchanged.
    pub fn scaled(&self, factor: f64) -> ConfigValue {
        match self {
            ConfigValue::Int(v) => {
                let scaled = (*v as f64 * factor).round() as i64;
                ConfigValue::Int(if *v > 0 { scaled.max(1) } else { scaled })
            }
            ConfigValue::Float(v) => ConfigValue::Float(v * factor),
            other => other.clone(),
        }
    }

    /// Parses a command-line literal: integer, then float, then bool, else string.
    pub fn parse_literal(raw: &str) -> ConfigValue {
        if let Ok(v) = raw.parse::<i64>() {
            return ConfigValue::Int(v);
        }
        if let Ok(v) = raw.parse::<f64>() {
            if v.is_finite() {
                return ConfigValue::Float(v);
            }
        }
        match raw {
            "true" => ConfigValue::Bool(true),
            "false" => ConfigValue::Bool(false),
            _ => ConfigValue::Str(raw.to_owned()),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            ConfigValue::Float(v) => v.is_finite(),
            _ => true,
        }
    }
}

impl fmt::Display for ConfigValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigValue::Bool(v) => write!(f, "{v}"),
            ConfigValue::Int(v) => write!(f, "{v}"),
            ConfigValue::Float(v) => write!(f, "{v:?}"),
            ConfigValue::Str(v) => f.write_str(v),
        }
    }
}

/// Parses `name=value` as used by `run -a` and `fork -a`.
pub fn parse_assignment(raw: &str) -> Result<(String, ConfigValue)> {
    let (name, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("expected name=value, got `{raw}`")))?;
    let name = name.trim();
    if name.is_empty() || name.chars().any(char::is_whitespace) {
        return Err(Error::invalid(format!("bad parameter name in `{raw}`")));
    }
    Ok((name.to_owned(), ConfigValue::parse_literal(value.trim())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_prefer_integers_then_floats() {
        assert_eq!(ConfigValue::parse_literal("128"), ConfigValue::Int(128));
        assert_eq!(ConfigValue::parse_literal("0.01"), ConfigValue::Float(0.01));
        assert_eq!(ConfigValue::parse_literal("true"), ConfigValue::Bool(true));
        assert_eq!(
            ConfigValue::parse_literal("adam"),
            ConfigValue::Str("adam".into())
        );
        assert_eq!(
            ConfigValue::parse_literal("inf"),
            ConfigValue::Str("inf".into())
        );
    }

    #[test]
    fn assignment_parsing() {
        assert_eq!(
            parse_assignment("lr=0.01").unwrap(),
            ("lr".to_owned(), ConfigValue::Float(0.01))
        );
        assert!(parse_assignment("lr").is_err());
        assert!(parse_assignment("=3").is_err());
    }

    #[test]
    fn json_distinguishes_int_and_float() {
        let v: ConfigValue = serde_json::from_str("1").unwrap();
        assert_eq!(v, ConfigValue::Int(1));
        let v: ConfigValue = serde_json::from_str("1.5").unwrap();
        assert_eq!(v, ConfigValue::Float(1.5));
        let v: ConfigValue = serde_json::from_str("\"x\"").unwrap();
        assert_eq!(v, ConfigValue::Str("x".into()));
    }

    #[test]
    fn scaling_keeps_integers_positive() {
        assert_eq!(ConfigValue::Int(1).scaled(0.8), ConfigValue::Int(1));
        assert_eq!(ConfigValue::Int(64).scaled(1.2), ConfigValue::Int(77));
        assert_eq!(ConfigValue::Float(0.5).scaled(0.8), ConfigValue::Float(0.4));
    }
}
