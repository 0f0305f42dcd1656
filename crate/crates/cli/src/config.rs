//! Run configuration: built-in defaults, then the TOML file, then `--set`
//! overrides, deserialised strictly so unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::error::CliError;

/// Name of the resolved-config echo written into every output directory.
pub const ECHO_FILE: &str = "config.toml";

/// User-supplied layers, merged before the defaults are known.
#[derive(Debug, Default, Clone)]
pub struct Layers {
    table: Table,
}

impl Layers {
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        for s in sets {
            apply_set(&mut table, s)?;
        }
        Ok(Layers { table })
    }

    /// A top-level string setting, if the user gave one.
    pub fn string(&self, key: &str) -> Result<Option<String>, CliError> {
        match self.table.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(CliError::config(format!("`{key}` must be a string, got {v}"))),
        }
    }

    /// Merges the user layers over `defaults` and deserialises the result.
    pub fn resolve<T: Serialize + DeserializeOwned>(&self, defaults: &T) -> Result<T, CliError> {
        let mut base = Table::try_from(defaults)
            .map_err(|e| CliError::config(format!("default config does not serialise: {e}")))?;
        merge(&mut base, &self.table);
        T::deserialize(Value::Table(base)).map_err(|e| CliError::config(one_line(&e.to_string())))
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// literal when it parses as one, otherwise as a bare string.
pub fn apply_set(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{spec}` is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("override key `{key}` is malformed")));
    }
    let value = parse_value(raw.trim());
    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::config(format!("override `{key}`: `{part}` is not a section"))),
        };
    }
    node.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Writes the fully resolved config into `dir`.
pub fn echo<T: Serialize>(cfg: &T, dir: &Path) -> Result<(), CliError> {
    let text = toml::to_string(cfg)
        .map_err(|e| CliError::config(format!("resolved config does not serialise: {e}")))?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(ECHO_FILE);
    fs::write(&path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}
