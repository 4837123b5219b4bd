//! Run configuration: a TOML file with dotted keys, plus `--set` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use rnode::{GapTaskSpec, ModelConfig, SplitSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Labeled JSONL dataset; when absent a synthetic gap-task set is generated.
    pub path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: GapTaskSpec,
    pub split: SplitSpec,
    /// `input_width` and `num_classes` are taken from the dataset.
    pub model: ModelConfig,
    /// `train.seed` always mirrors the top-level `seed`.
    pub train: TrainConfig,
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides and an optional seed.
    pub fn resolve(
        path: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| {
                    CliError::config(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse::<Table>()
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        // Snapshots carry `train.seed`; it must agree with the top-level seed.
        let top = table.get("seed").cloned().unwrap_or(Value::Integer(0));
        if let Some(train) = table.get_mut("train").and_then(Value::as_table_mut) {
            if let Some(inner) = train.remove("seed") {
                if inner != top {
                    return Err(CliError::config(
                        "train.seed: must match the top-level `seed`",
                    ));
                }
            }
        }
        if let Some(s) = seed {
            table.insert("seed".into(), Value::Integer(s as i64));
        }
        let mut cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.train.validate()?;
        cfg.split.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Sets `a.b.c = value`; the value is parsed as TOML, falling back to a string.
fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::config(format!("bad override key `{key}`")));
    }
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
