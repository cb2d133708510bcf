//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Lists are comma separated
//! (`omega = 1.0, 0.5, 0.25`), `clip = none` disables clipping, and enums
//! use their lowercase names. Unknown keys are rejected.

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::trainer::TrainerConfig;

const LIST_KEYS: &[&str] = &["omega", "boundaries"];

fn parse_scalar(raw: &str) -> Value {
    let raw = raw.trim();
    match raw {
        "none" | "null" => Value::Null,
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => {
            if let Ok(u) = raw.parse::<u64>() {
                Value::from(u)
            } else if let Ok(f) = raw.parse::<f64>() {
                serde_json::Number::from_f64(f).map_or(Value::String(raw.into()), Value::Number)
            } else {
                Value::String(raw.trim_matches('"').into())
            }
        }
    }
}

fn parse_value(key: &str, raw: &str) -> Value {
    if LIST_KEYS.contains(&key) {
        let raw = raw.trim().trim_start_matches('[').trim_end_matches(']');
        if raw.trim().is_empty() {
            return Value::Array(Vec::new());
        }
        Value::Array(raw.split(',').map(parse_scalar).collect())
    } else {
        parse_scalar(raw)
    }
}

fn base_map(base: &TrainerConfig) -> Map<String, Value> {
    match serde_json::to_value(base) {
        Ok(Value::Object(m)) => m,
        _ => unreachable!("config serializes to an object"),
    }
}

/// Applies `key = value` assignments on top of `base`.
pub fn apply<'a>(
    base: &TrainerConfig,
    assignments: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Result<TrainerConfig> {
    let defaults = base_map(base);
    let mut map = defaults.clone();
    for (key, raw) in assignments {
        let key = key.trim();
        if !defaults.contains_key(key) {
            return Err(Error::config(format!("unknown key `{key}`")));
        }
        let value = parse_value(key, raw);
        let mut probe = defaults.clone();
        probe.insert(key.to_string(), value.clone());
        if let Err(e) = serde_json::from_value::<TrainerConfig>(Value::Object(probe)) {
            return Err(Error::config(format!("{key}: invalid value `{}` ({e})", raw.trim())));
        }
        map.insert(key.to_string(), value);
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| Error::config(e.to_string()))
}

/// Parses a whole config file over the defaults.
pub fn parse(text: &str) -> Result<TrainerConfig> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
        pairs.push((k, v));
    }
    apply(&TrainerConfig::default(), pairs)
}

/// Parses `key=value` command-line overrides.
pub fn apply_overrides(base: &TrainerConfig, overrides: &[String]) -> Result<TrainerConfig> {
    let mut pairs = Vec::with_capacity(overrides.len());
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{o}` is not `key=value`")))?;
        pairs.push((k, v));
    }
    apply(base, pairs)
}

/// Renders `cfg` in the same format `parse` reads.
pub fn to_text(cfg: &TrainerConfig) -> String {
    let mut out = String::new();
    for (k, v) in base_map(cfg) {
        let rendered = match v {
            Value::Null => "none".to_string(),
            Value::String(s) => s,
            Value::Array(items) => items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "),
            other => other.to_string(),
        };
        out.push_str(&format!("{k} = {rendered}\n"));
    }
    out
}
