//! Run configuration: one TOML file plus `--set key=value` overrides,
//! resolved into a single [`RunConfig`] that is recorded in every manifest.

use std::fmt;
use std::path::Path;

use amil_core::{GeneratorConfig, ModelConfig, Preset, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// A problem with the configuration or the command line (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Group fold of the dataset used for per-epoch validation in `train`.
    pub validation_fold: Option<usize>,
    pub histogram_bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            validation_fold: None,
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

/// Which model keys the user set explicitly; the rest may be filled in from
/// the dataset.
#[derive(Debug, Clone, Copy, Default)]
pub struct Explicit {
    pub input_dim: bool,
    pub n_classes: bool,
}

pub fn read_table(path: Option<&Path>) -> anyhow::Result<Table> {
    match path {
        None => Ok(Table::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| usage(format!("config {}: {e}", p.display())))
        }
    }
}

fn parse_value(raw: &str) -> Value {
    let doc = format!("v = {raw}");
    match doc.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Applies `section.key=value`; the value is parsed as TOML, falling back
/// to a bare string.
pub fn apply_override(table: &mut Table, assignment: &str) -> anyhow::Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| usage(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(usage(format!("override `{assignment}` has an empty key")));
    }
    let mut cur = table;
    for key in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(key.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| usage(format!("`{key}` in `{path}` is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn has_key(table: &Table, section: &str, key: &str) -> bool {
    table
        .get(section)
        .and_then(Value::as_table)
        .is_some_and(|t| t.contains_key(key))
}

/// Resolves a raw table. Generator keys overlay the chosen preset, so a
/// config may set `generator.preset = "hard"` and change only a few fields.
pub fn resolve(mut table: Table) -> anyhow::Result<(RunConfig, Explicit)> {
    let explicit = Explicit {
        input_dim: has_key(&table, "model", "input_dim"),
        n_classes: has_key(&table, "model", "n_classes"),
    };
    let user_gen = match table.remove("generator") {
        None => Table::new(),
        Some(Value::Table(t)) => t,
        Some(_) => return Err(usage("`generator` must be a table")),
    };
    let preset: Preset = match user_gen.get("preset") {
        None => Preset::default(),
        Some(v) => v
            .clone()
            .try_into()
            .map_err(|e| usage(format!("generator.preset: {e}")))?,
    };
    let mut gen = Table::try_from(GeneratorConfig::preset(preset))?;
    gen.extend(user_gen);
    table.insert("generator".into(), Value::Table(gen));
    for section in ["model", "train", "experiment"] {
        table
            .entry(section.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
    }
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e| usage(format!("invalid config: {e}")))?;
    Ok((cfg, explicit))
}

/// Sets every seed in the configuration.
pub fn set_seed(table: &mut Table, seed: u64) -> anyhow::Result<()> {
    for key in ["generator.seed", "model.seed", "train.seed"] {
        apply_override(table, &format!("{key}={seed}"))?;
    }
    Ok(())
}
