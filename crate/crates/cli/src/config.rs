//! Config-file handling: one TOML table per command, keys spelled like the
//! flags. Flags override file values, which override built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cocite::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "COCITE_DATA_DIR";

/// Name of the snapshot written next to a command's outputs.
pub const SNAPSHOT_FILE: &str = "resolved-config.toml";

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

/// Loads the table for `command` from a config file, if one was given.
pub fn load_section(path: Option<&Path>, command: &str) -> Result<Option<toml::Table>> {
    let Some(path) = path else { return Ok(None) };
    let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
    match table.remove(command) {
        None => Ok(None),
        Some(toml::Value::Table(t)) => Ok(Some(t)),
        Some(_) => Err(config_error(format!("`{command}` in {} must be a table", path.display()))),
    }
}

/// Overlays the flags that were given onto the file section.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, file: Option<toml::Table>) -> Result<T> {
    let mut merged = match file {
        Some(t) => serde_json::to_value(t)?,
        None => Value::Object(Default::default()),
    };
    let Value::Object(given) = serde_json::to_value(flags)? else {
        unreachable!("argument structs serialize to objects")
    };
    let target = merged.as_object_mut().expect("tables serialize to objects");
    for (k, v) in given {
        if !v.is_null() {
            target.insert(k, v);
        }
    }
    serde_json::from_value(merged).map_err(|e| config_error(e.to_string()))
}

/// Writes `[command]` with every resolved value so the run can be replayed
/// with `--config`.
pub fn write_snapshot<T: Serialize>(path: &Path, command: &str, resolved: &T) -> Result<()> {
    let mut root = toml::Table::new();
    root.insert(command.to_string(), toml::Value::try_from(resolved)?);
    std::fs::write(path, toml::to_string(&root)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Snapshot path for a command whose output is a single file.
pub fn snapshot_beside(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.toml");
    output.with_file_name(name)
}

/// Parses a library enum from its serialized name, e.g. `router_ce`.
pub fn parse_enum<T: DeserializeOwned>(value: &str, what: &str) -> Result<T> {
    serde_json::from_value(Value::String(value.replace('-', "_")))
        .map_err(|_| config_error(format!("unknown {what} `{value}`")))
}

/// A required setting that may come from a flag, the file or the data
/// directory variable.
pub fn data_dir(value: &Option<PathBuf>) -> Result<PathBuf> {
    match value {
        Some(p) => Ok(p.clone()),
        None => std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| config_error(format!("no data directory: pass --data-dir or set {DATA_DIR_ENV}"))),
    }
}

pub fn required<T: Clone>(value: &Option<T>, flag: &str) -> Result<T> {
    value.clone().ok_or_else(|| config_error(format!("missing required setting --{flag}")))
}
