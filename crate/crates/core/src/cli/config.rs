//! Flat dotted-key configuration: a TOML file (tables or dotted keys) plus
//! `key=value` overrides, validated against the documented key set.

use std::collections::BTreeMap;
use std::path::Path;

use toml::Value;

use super::CliError;
use crate::pipeline::RunConfig;

/// Optional keys with no default value (absent from the serialised defaults).
const OPTIONAL_KEYS: &[&str] = &[
    "max_steps",
    "output_dir",
    "dataset.train_images",
    "dataset.train_labels",
    "dataset.val_images",
    "dataset.val_labels",
    "stage2.max_outer_steps",
];

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = toml::map::Map::new();
    for (key, v) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("non-empty key");
        let mut table = &mut root;
        for p in parts {
            table = table
                .entry(p.to_string())
                .or_insert_with(|| Value::Table(toml::map::Map::new()))
                .as_table_mut()
                .expect("documented keys never nest under a value");
        }
        table.insert(last.to_string(), v.clone());
    }
    Value::Table(root)
}

/// Every documented dotted key with its default (optional keys map to `None`).
pub fn documented_keys() -> BTreeMap<String, Option<Value>> {
    let defaults = Value::try_from(RunConfig::default()).expect("defaults serialise");
    let mut flat = BTreeMap::new();
    flatten("", &defaults, &mut flat);
    let mut keys: BTreeMap<String, Option<Value>> =
        flat.into_iter().map(|(k, v)| (k, Some(v))).collect();
    for k in OPTIONAL_KEYS {
        keys.entry(k.to_string()).or_insert(None);
    }
    keys
}

fn nearest<'a>(key: &str, known: impl Iterator<Item = &'a String>) -> Option<&'a String> {
    known.min_by(|a, b| {
        let (da, db) = (strsim::levenshtein(key, a), strsim::levenshtein(key, b));
        da.cmp(&db).then_with(|| a.cmp(b))
    })
}

/// A `key=value` override; the value is read as a TOML literal and falls back
/// to a plain string.
fn parse_override(text: &str) -> Result<(String, Value), CliError> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Override(format!("`{text}` is not key=value")))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key, value))
}

/// Reads `path` (if any), applies `overrides` in order and validates the
/// result. Unknown keys are rejected with the closest documented key.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut flat = BTreeMap::new();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Parse(e.to_string()))?;
        flatten("", &Value::Table(table), &mut flat);
    }
    for o in overrides {
        let (k, v) = parse_override(o)?;
        flat.insert(k, v);
    }
    let known = documented_keys();
    for key in flat.keys() {
        if !known.contains_key(key) {
            return Err(CliError::UnknownKey {
                key: key.clone(),
                suggestion: nearest(key, known.keys()).cloned(),
            });
        }
    }
    let config: RunConfig = unflatten(&flat)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Type(e.message().to_string()))?;
    config
        .validate()
        .map_err(|e| CliError::Invalid(e.to_string()))?;
    Ok(config)
}

/// The effective configuration as TOML.
pub fn render_config(config: &RunConfig) -> String {
    toml::to_string(config).expect("config serialises")
}
