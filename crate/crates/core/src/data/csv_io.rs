use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, SimSpec, TimeSeriesSample};
use crate::error::{Error, Result};

const ID: &str = "sample_id";
const STEP: &str = "step";
const GLOBAL: &str = "global_label";
const LOCAL: &str = "local_label";

/// Summary written next to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub d: usize,
    /// Longest sample length.
    pub t: usize,
    pub feature_names: Vec<String>,
    pub label_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimSpec>,
}

impl DatasetManifest {
    pub fn describe(ds: &Dataset, simulation: Option<&SimSpec>) -> Self {
        let mut label_names = Vec::new();
        if ds.samples.iter().any(|s| s.global_label.is_some()) {
            label_names.push(GLOBAL.to_string());
        }
        if ds.samples.iter().any(|s| s.local_label.is_some()) {
            label_names.push(LOCAL.to_string());
        }
        DatasetManifest {
            n: ds.len(),
            d: ds.n_features(),
            t: ds.max_len(),
            feature_names: ds.feature_names.clone(),
            label_names,
            seed: simulation.map(|s| s.seed),
            simulation: simulation.cloned(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(file)?)
    }
}

/// Writes one row per (sample, step). Missing values are empty cells;
/// label columns are written only when some sample carries that label.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let with_global = ds.samples.iter().any(|s| s.global_label.is_some());
    let with_local = ds.samples.iter().any(|s| s.local_label.is_some());

    let mut header = vec![ID.to_string(), STEP.to_string()];
    header.extend(ds.feature_names.iter().cloned());
    if with_global {
        header.push(GLOBAL.into());
    }
    if with_local {
        header.push(LOCAL.into());
    }
    w.write_record(&header)?;

    let label = |l: Option<u32>| l.map(|v| v.to_string()).unwrap_or_default();
    for s in &ds.samples {
        for t in 0..s.len() {
            let mut row = vec![s.id.clone(), t.to_string()];
            for f in 0..s.n_features() {
                row.push(if s.mask[f][t] {
                    s.values[f][t].to_string()
                } else {
                    String::new()
                });
            }
            if with_global {
                row.push(label(s.global_label));
            }
            if with_local {
                row.push(label(s.local_label));
            }
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Partial {
    rows: BTreeMap<usize, Vec<Option<f64>>>,
    global: Option<u32>,
    local: Option<u32>,
}

/// Reads the wide format written by [`save_csv`]. Columns other than
/// `sample_id`, `step`, `global_label` and `local_label` are features.
/// Empty or `NaN` cells become masked entries, as do steps skipped inside a
/// sample's range. Samples keep their order of first appearance.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers()?.clone();
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = col(ID).ok_or_else(|| parse_err(1, format!("missing `{ID}` column")))?;
    let step_col = col(STEP).ok_or_else(|| parse_err(1, format!("missing `{STEP}` column")))?;
    let global_col = col(GLOBAL);
    let local_col = col(LOCAL);
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| ![Some(id_col), Some(step_col), global_col, local_col].contains(&Some(i)))
        .collect();
    if feature_cols.is_empty() {
        return Err(parse_err(1, "no feature columns".into()));
    }
    let feature_names: Vec<String> = feature_cols.iter().map(|&i| headers[i].trim().to_string()).collect();

    let mut order = Vec::new();
    let mut partial: HashMap<String, Partial> = HashMap::new();
    for record in r.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let cell = |i: usize| record.get(i).unwrap_or("").trim();

        let id = cell(id_col).to_string();
        if id.is_empty() {
            return Err(parse_err(line, format!("empty `{ID}`")));
        }
        let step: usize = cell(step_col)
            .parse()
            .map_err(|_| parse_err(line, format!("`{STEP}` must be a non-negative integer, got {:?}", cell(step_col))))?;
        let mut values = Vec::with_capacity(feature_cols.len());
        for (&c, name) in feature_cols.iter().zip(&feature_names) {
            let raw = cell(c);
            if raw.is_empty() || raw.eq_ignore_ascii_case("nan") {
                values.push(None);
            } else {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| parse_err(line, format!("column `{name}`: not a number: {raw:?}")))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("column `{name}`: non-finite value {raw:?}")));
                }
                values.push(Some(v));
            }
        }
        let label = |c: Option<usize>, name: &str| -> Result<Option<u32>> {
            match c.map(cell) {
                None | Some("") => Ok(None),
                Some(raw) => raw
                    .parse()
                    .map(Some)
                    .map_err(|_| parse_err(line, format!("`{name}` must be a non-negative integer, got {raw:?}"))),
            }
        };
        let (g, l) = (label(global_col, GLOBAL)?, label(local_col, LOCAL)?);

        let entry = partial.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Partial {
                rows: BTreeMap::new(),
                global: g,
                local: l,
            }
        });
        if entry.rows.insert(step, values).is_some() {
            return Err(parse_err(line, format!("duplicate step {step} for sample `{id}`")));
        }
        for (name, have, new) in [(GLOBAL, &mut entry.global, g), (LOCAL, &mut entry.local, l)] {
            if have.is_none() {
                *have = new;
            } else if new.is_some() && *have != new {
                return Err(parse_err(line, format!("`{name}` changes within sample `{id}`")));
            }
        }
    }

    let d = feature_names.len();
    let samples = order
        .into_iter()
        .map(|id| {
            let p = partial.remove(&id).expect("recorded on first sight");
            let t = p.rows.keys().next_back().map_or(0, |m| m + 1);
            let mut values = vec![vec![0.0; t]; d];
            let mut mask = vec![vec![false; t]; d];
            for (step, row) in p.rows {
                for (f, v) in row.into_iter().enumerate() {
                    if let Some(v) = v {
                        values[f][step] = v;
                        mask[f][step] = true;
                    }
                }
            }
            TimeSeriesSample {
                id,
                values,
                mask,
                global_label: p.global,
                local_label: p.local,
            }
        })
        .collect();
    Dataset::new(feature_names, samples)
}
