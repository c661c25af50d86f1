//! TOML experiment files, dotted-key overrides and the resolved config
//! written into every run directory.

use std::path::Path;

use mhd_core::config::RunConfig;
use toml::{Table, Value};

use crate::failure::Failure;

/// Parses `key=value`. The value is read as a TOML literal, falling back to
/// a bare string, so `mode=fedavg` and `hidden=[32, 32]` both work.
pub fn parse_assignment(s: &str) -> Result<(String, Value), Failure> {
    let (key, raw) =
        s.split_once('=').ok_or_else(|| Failure::config(format!("override `{s}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Failure::config(format!("override `{s}` has an empty key segment")));
    }
    Ok((key.to_string(), parse_value(raw.trim())))
}

pub fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_key(root: &mut Table, key: &str, value: Value) -> Result<(), Failure> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let leaf = parts.pop().expect("split yields at least one part");
    let mut table = root;
    let mut path = String::new();
    for p in parts {
        if !path.is_empty() {
            path.push('.');
        }
        path.push_str(p);
        let entry = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        table = match entry {
            Value::Table(t) => t,
            _ => return Err(Failure::config(format!("invalid configuration at `{path}`: not a table"))),
        };
    }
    table.insert(leaf.to_string(), value);
    Ok(())
}

pub fn read_table(path: &Path) -> Result<Table, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<Table>().map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

/// Deserializes without semantic validation. Unknown keys and type errors
/// name the dotted key at fault.
pub fn deserialize(table: &Table) -> Result<RunConfig, Failure> {
    let value = Value::Table(table.clone());
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.inner().to_string();
        let first = inner.lines().next().unwrap_or_default();
        Failure::config(format!("invalid configuration at `{path}`: {first}"))
    })
}

/// Deserializes and validates.
pub fn to_config(table: &Table) -> Result<RunConfig, Failure> {
    let cfg = deserialize(table)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads an optional file, applies overrides in order and then the seed.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<(Table, RunConfig), Failure> {
    let mut table = match path {
        Some(p) => read_table(p)?,
        None => Table::new(),
    };
    for o in overrides {
        let (k, v) = parse_assignment(o)?;
        set_key(&mut table, &k, v)?;
    }
    if let Some(s) = seed {
        table.insert("seed".into(), Value::Integer(seed_to_toml(s)?));
    }
    let cfg = to_config(&table)?;
    Ok((table, cfg))
}

fn seed_to_toml(seed: u64) -> Result<i64, Failure> {
    i64::try_from(seed)
        .map_err(|_| Failure::config(format!("invalid configuration at `seed`: {seed} exceeds {}", i64::MAX)))
}

/// The resolved config as TOML; re-running from it reproduces the run.
pub fn to_toml(cfg: &RunConfig) -> Result<String, Failure> {
    toml::to_string_pretty(&cfg.resolved()).map_err(|e| Failure::other(format!("cannot serialize config: {e}")))
}

/// Every default, ready to be edited into an experiment file.
pub fn defaults_reference() -> Result<String, Failure> {
    let body = toml::to_string_pretty(&RunConfig::default())
        .map_err(|e| Failure::other(format!("cannot serialize defaults: {e}")))?;
    Ok(format!(
        "# Defaults of every experiment setting. Omitted keys take these values.\n\
         # dataset.seed and partition.seed are derived from `seed` when absent.\n\
         # training.pool_size defaults to partition.num_clients.\n\
         # distill.top_k = 0 sends full probability rows.\n\n{body}"
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_parse_as_toml_or_fall_back_to_strings() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("0.5"), Value::Float(0.5));
        assert_eq!(parse_value("true"), Value::Boolean(true));
        assert_eq!(parse_value("fedavg"), Value::String("fedavg".into()));
        assert_eq!(parse_value("[1, 2]"), Value::Array(vec![Value::Integer(1), Value::Integer(2)]));
    }

    #[test]
    fn dotted_keys_create_tables() {
        let mut t = Table::new();
        set_key(&mut t, "distill.nu_aux", Value::Float(3.0)).unwrap();
        set_key(&mut t, "distill.delta", Value::Integer(2)).unwrap();
        let cfg = to_config(&t).unwrap();
        assert_eq!(cfg.distill.nu_aux, 3.0);
        assert_eq!(cfg.distill.delta, 2);
    }

    #[test]
    fn overriding_through_a_scalar_is_a_config_error() {
        let mut t = Table::new();
        set_key(&mut t, "seed", Value::Integer(1)).unwrap();
        let e = set_key(&mut t, "seed.x", Value::Integer(1)).unwrap_err();
        assert_eq!(e.code, 2);
    }

    #[test]
    fn unknown_keys_are_named() {
        let mut t = Table::new();
        set_key(&mut t, "distill.nu_typo", Value::Float(1.0)).unwrap();
        let e = to_config(&t).unwrap_err();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("distill.nu_typo"), "{}", e.message);
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig { seed: 9, ..RunConfig::default() };
        cfg.distill.top_k = 0;
        let text = to_toml(&cfg).unwrap();
        let back = to_config(&text.parse::<Table>().unwrap()).unwrap();
        assert_eq!(back, cfg.resolved());
        assert_eq!(back.resolved(), back);
    }

    #[test]
    fn defaults_reference_parses_to_the_defaults() {
        let text = defaults_reference().unwrap();
        assert_eq!(to_config(&text.parse::<Table>().unwrap()).unwrap(), RunConfig::default());
    }
}
