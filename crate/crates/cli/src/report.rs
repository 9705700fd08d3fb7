//! `report.json`: one object per stage, merged into a single file with
//! sorted keys so that reruns are byte-identical.

use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

pub const FILE: &str = "report.json";

fn load(path: &Path) -> Result<Map<String, Value>, CliError> {
    if !path.exists() {
        return Ok(Map::new());
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    match serde_json::from_str(&text).map_err(|e| CliError::file(path, e))? {
        Value::Object(map) => Ok(map),
        _ => Err(CliError::Data(format!("{}: not a JSON object", path.display()))),
    }
}

fn store(path: &Path, map: &Map<String, Value>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(map).map_err(|e| CliError::file(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::file(path, e))
}

/// Starts a fresh report holding only `sections`.
pub fn reset(out: &Path, sections: Vec<(&str, Value)>) -> Result<(), CliError> {
    let map = sections.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    store(&out.join(FILE), &map)
}

/// Adds or replaces one section.
pub fn set(out: &Path, section: &str, value: impl Serialize) -> Result<(), CliError> {
    let path = out.join(FILE);
    let mut map = load(&path)?;
    let value = serde_json::to_value(value).map_err(|e| CliError::file(&path, e))?;
    map.insert(section.to_string(), value);
    store(&path, &map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sections_merge_with_sorted_keys() {
        let dir = tempfile::tempdir().unwrap();
        reset(dir.path(), vec![("risk", json!({"b": 1, "a": 2}))]).unwrap();
        set(dir.path(), "config", json!({"seed": 3})).unwrap();
        set(dir.path(), "risk", json!({"a": 5})).unwrap();
        let text = fs::read_to_string(dir.path().join(FILE)).unwrap();
        let config = text.find("\"config\"").unwrap();
        let risk = text.find("\"risk\"").unwrap();
        assert!(config < risk);
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["risk"], json!({"a": 5}));
    }
}
