//! Layered run configuration: flags override the config file, which
//! overrides the built-in defaults. Layers are merged as JSON objects and the
//! result is decoded into the command's config type, so every layer is
//! checked against the same field list.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::{CliError, CliResult};

/// Reads a TOML or JSON config file (chosen by extension, TOML otherwise).
fn load_file(path: &Path) -> CliResult<Map<String, Value>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", path.display())))?;
    let value: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("config file {}: {e}", path.display())))?
    };
    match value {
        Value::Object(map) => Ok(map),
        _ => Err(CliError::Usage(format!("config file {} must hold a table of settings", path.display()))),
    }
}

fn to_object<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("config types serialize") {
        Value::Object(map) => map,
        _ => unreachable!("config types are structs"),
    }
}

/// Merges defaults, an optional config file and the flags that were set.
/// `flags` must serialize only the options given on the command line.
pub fn resolve<T, F>(defaults: &T, file: Option<&Path>, flags: &F) -> CliResult<T>
where
    T: Serialize + DeserializeOwned,
    F: Serialize,
{
    let mut merged = to_object(defaults);
    if let Some(path) = file {
        for (key, value) in load_file(path)? {
            if !merged.contains_key(&key) {
                let known: Vec<&str> = merged.keys().map(String::as_str).collect();
                return Err(CliError::Usage(format!(
                    "config file {}: unknown key `{key}` (expected one of: {})",
                    path.display(),
                    known.join(", ")
                )));
            }
            merged.insert(key, value);
        }
    }
    for (key, value) in to_object(flags) {
        if !value.is_null() {
            merged.insert(key, value);
        }
    }
    serde_path_to_error::deserialize(Value::Object(merged))
        .map_err(|e| CliError::Usage(format!("config field `{}`: {}", e.path(), e.inner())))
}

pub fn is_false(b: &bool) -> bool {
    !*b
}
