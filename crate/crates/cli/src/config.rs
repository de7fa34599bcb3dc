use std::path::{Path, PathBuf};

use glrep::data::SimSpec;
use glrep::eval::ProbeConfig;
use glrep::model::ModelConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Dataset CSV; its manifest sits next to it.
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Forecast horizon in windows.
    pub horizon: usize,
    pub probe_hidden: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives simulation, initialization, training order and evaluation splits.
    pub seed: u64,
    pub paths: Paths,
    pub model: ModelConfig,
    pub sim: SimSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let probe = ProbeConfig::default();
        RunConfig {
            seed: 0,
            paths: Paths {
                data: "data/sim.csv".into(),
                checkpoint: "runs/model.json".into(),
                out_dir: "runs".into(),
            },
            model: ModelConfig::default(),
            sim: SimSpec::default(),
            eval: EvalConfig {
                horizon: 2,
                probe_hidden: probe.hidden,
                probe_epochs: probe.epochs,
                probe_lr: probe.lr,
                test_fraction: probe.test_fraction,
            },
        }
    }
}

impl RunConfig {
    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            hidden: self.eval.probe_hidden,
            epochs: self.eval.probe_epochs,
            lr: self.eval.probe_lr,
            test_fraction: self.eval.test_fraction,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Invalid(format!("cannot serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Invalid(format!("bad config: {e}")))
    }
}

/// Flag overrides, applied after the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    /// `dotted.key=value` pairs; values parse as TOML, falling back to strings.
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub epochs: Option<usize>,
}

const SEED_KEYS: [&str; 2] = ["model.seed", "sim.seed"];

/// Defaults, then the file, then the overrides.
pub fn resolve(file: Option<&Path>, ov: &Overrides) -> Result<RunConfig, CliError> {
    let mut user = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for kv in &ov.set {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Invalid(format!("override `{kv}` is not key=value")))?;
        set_dotted(&mut user, key.trim(), parse_value(raw.trim()))?;
    }
    if let Some(s) = ov.seed {
        set_dotted(&mut user, "seed", Value::Integer(seed_to_i64(s)?))?;
    }
    if let Some(l) = ov.lambda {
        set_dotted(&mut user, "model.lambda", Value::Float(l))?;
    }
    if let Some(e) = ov.epochs {
        set_dotted(&mut user, "model.epochs", Value::Integer(e as i64))?;
    }
    // A dumped config repeats the seed in these blocks; anything else conflicts.
    let pinned: Vec<(&str, Value)> = SEED_KEYS
        .iter()
        .filter_map(|&k| get_dotted(&user, k).map(|v| (k, v.clone())))
        .collect();

    let mut merged = Value::try_from(RunConfig::default())
        .map_err(|e| CliError::Invalid(format!("cannot serialize defaults: {e}")))?;
    let Value::Table(base) = &mut merged else {
        unreachable!("a struct serializes to a table")
    };
    merge(base, user, "")?;
    let mut cfg: RunConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Invalid(format!("bad config: {e}")))?;
    for (key, v) in pinned {
        if v.as_integer() != Some(seed_to_i64(cfg.seed)?) {
            return Err(CliError::Invalid(format!(
                "`{key}` = {v} disagrees with the top-level `seed` = {}; set only `seed`",
                cfg.seed
            )));
        }
    }
    cfg.model.seed = cfg.seed;
    cfg.sim.seed = cfg.seed;
    cfg.model.validate()?;
    cfg.sim.validate()?;
    if cfg.eval.horizon == 0 {
        return Err(CliError::Invalid("eval.horizon must be at least 1".into()));
    }
    Ok(cfg)
}

fn seed_to_i64(s: u64) -> Result<i64, CliError> {
    i64::try_from(s).map_err(|_| CliError::Invalid(format!("seed {s} does not fit in a TOML integer")))
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn get_dotted<'a>(t: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut cur = t.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn set_dotted(t: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Invalid(format!("bad config key `{key}`")));
    }
    let mut cur = t;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Invalid(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Overlays `user` onto `base`, rejecting keys the defaults do not have.
fn merge(base: &mut Table, user: Table, prefix: &str) -> Result<(), CliError> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (None, _) => return Err(CliError::Invalid(format!("unknown config key `{path}`"))),
            (Some(Value::Table(b)), Value::Table(u)) => merge(b, u, &path)?,
            (Some(Value::Table(_)), _) => {
                return Err(CliError::Invalid(format!("`{path}` must be a table")));
            }
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}
