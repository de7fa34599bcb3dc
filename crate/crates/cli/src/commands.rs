use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use glrep::data::{load_csv, save_csv, simulate, window, window_sample, Dataset, DatasetManifest, SimSpec};
use glrep::diff::{analytic_gradients, compare_with_finite_differences, BoundParams, GradCheckReport, Graph};
use glrep::eval::{
    counterfactual_swap_eval, forecast_eval, mi_diagnostic, probe_global, ForecastReport, MiReport, ProbeReport,
    SwapReport,
};
use glrep::model::{loss_terms, train_with, Batch, BatchNoise, EpochMetrics, Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_THRESHOLD: f64 = 1e-3;
const GRADCHECK_STEP: f64 = 1e-5;

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e)),
        _ => Ok(()),
    }
}

fn out_file(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = &cfg.paths.out_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    Ok(dir.join(name))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    create_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    create_parent(path)?;
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `data/sim.csv` → `data/sim.manifest.json`.
pub fn manifest_path(data: &Path) -> PathBuf {
    let stem = data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    data.with_file_name(format!("{stem}.manifest.json"))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let path = &cfg.paths.data;
    if !path.exists() {
        return Err(CliError::Invalid(format!(
            "dataset {} does not exist; run `simulate` first or set paths.data",
            path.display()
        )));
    }
    Ok(load_csv(path)?)
}

fn load_model(path: &Path) -> Result<Model> {
    if !path.exists() {
        return Err(CliError::Invalid(format!(
            "checkpoint {} does not exist; run `train` first or set paths.checkpoint",
            path.display()
        )));
    }
    Ok(Model::load(path)?)
}

pub struct SimulateOutcome {
    pub data: PathBuf,
    pub manifest: PathBuf,
    pub n_samples: usize,
    pub length: usize,
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateOutcome> {
    let ds = simulate(&cfg.sim)?;
    let data = cfg.paths.data.clone();
    create_parent(&data)?;
    save_csv(&ds, &data)?;
    let manifest = manifest_path(&data);
    DatasetManifest::describe(&ds, Some(&cfg.sim)).save(&manifest)?;
    Ok(SimulateOutcome {
        data,
        manifest,
        n_samples: ds.len(),
        length: ds.max_len(),
    })
}

pub const METRICS_COLUMNS: [&str; 5] = ["nll", "kl_local", "kl_global", "reg", "total"];

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub digest: String,
    pub metrics: PathBuf,
    pub last: EpochMetrics,
}

#[derive(Serialize)]
struct TrainManifest<'a> {
    checkpoint: &'a Path,
    checkpoint_sha256: &'a str,
    data: &'a Path,
    data_sha256: &'a str,
    epochs: usize,
    config: &'a RunConfig,
}

/// Trains on `paths.data`, writing the checkpoint, one metrics row per epoch,
/// a manifest and a log whose first line is the only time-dependent content.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let ds = load_data(cfg)?;
    let metrics = out_file(cfg, "metrics.csv")?;
    let mut w = csv_writer(&metrics)?;
    w.write_record(METRICS_COLUMNS)?;
    let mut write_err = None;
    let (model, log) = train_with(&ds, &cfg.model, |m| {
        if write_err.is_none() {
            let row = [m.nll, m.kl_local, m.kl_global, m.reg, m.total].map(|v| v.to_string());
            if let Err(e) = w.write_record(&row).and_then(|_| w.flush().map_err(Into::into)) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    w.flush().map_err(|e| CliError::io(&metrics, e))?;

    let checkpoint = cfg.paths.checkpoint.clone();
    create_parent(&checkpoint)?;
    model.save(&checkpoint)?;
    let digest = file_digest(&checkpoint)?;
    let data_digest = file_digest(&cfg.paths.data)?;
    write_json(
        &out_file(cfg, "train.manifest.json")?,
        &TrainManifest {
            checkpoint: &checkpoint,
            checkpoint_sha256: &digest,
            data: &cfg.paths.data,
            data_sha256: &data_digest,
            epochs: log.epochs.len(),
            config: cfg,
        },
    )?;

    let log_path = out_file(cfg, "train.log")?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut text = format!("# unix time {started}\n");
    text.push_str(&format!("checkpoint {} sha256 {digest}\n", checkpoint.display()));
    text.push_str(&format!("data {} sha256 {data_digest}\n", cfg.paths.data.display()));
    text.push_str(&cfg.to_toml()?);
    fs::write(&log_path, text).map_err(|e| CliError::io(&log_path, e))?;

    let last = *log.epochs.last().ok_or_else(|| CliError::Invalid("training ran zero epochs".into()))?;
    Ok(TrainOutcome {
        checkpoint,
        digest,
        metrics,
        last,
    })
}

#[derive(Serialize)]
struct SwapSummary<'a> {
    slope_agreement: f64,
    frequency_preservation: f64,
    class_slope_sign: &'a std::collections::BTreeMap<u32, f64>,
    class_frequency: &'a std::collections::BTreeMap<u32, f64>,
    n_pairs: usize,
}

#[derive(Serialize)]
struct MiSummary {
    mi: f64,
    n_samples: usize,
    bins: usize,
    lambda: f64,
}

#[derive(Debug, Serialize)]
pub struct MiComparison {
    pub this_checkpoint: PathBuf,
    pub this_lambda: f64,
    pub this_mi: f64,
    pub other_checkpoint: PathBuf,
    pub other_lambda: f64,
    pub other_mi: f64,
}

impl MiComparison {
    pub fn line(&self) -> String {
        format!(
            "mi lambda={} {:.6} vs lambda={} {:.6}",
            self.this_lambda, self.this_mi, self.other_lambda, self.other_mi
        )
    }
}

pub struct EvalOutcome {
    pub probe: ProbeReport,
    pub swap: SwapReport,
    pub mi: MiReport,
    pub comparison: Option<MiComparison>,
}

/// Probe, swap and MI reports for `paths.checkpoint` on `paths.data`.
/// `compare` adds the MI of a second checkpoint on the same data.
pub fn cmd_eval(cfg: &RunConfig, compare: Option<&Path>) -> Result<EvalOutcome> {
    let model = load_model(&cfg.paths.checkpoint)?;
    let ds = load_data(cfg)?;
    let probe = probe_global(&model, &ds, &cfg.probe())?;
    let swap = counterfactual_swap_eval(&model, &ds, cfg.seed)?;
    let mi = mi_diagnostic(&model, &ds)?;

    write_json(&out_file(cfg, "probe.json")?, &probe)?;
    write_json(
        &out_file(cfg, "swap.json")?,
        &SwapSummary {
            slope_agreement: swap.slope_agreement,
            frequency_preservation: swap.frequency_preservation,
            class_slope_sign: &swap.class_slope_sign,
            class_frequency: &swap.class_frequency,
            n_pairs: swap.rows.len(),
        },
    )?;
    let mut w = csv_writer(&out_file(cfg, "swap.csv")?)?;
    for row in &swap.rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::io(&cfg.paths.out_dir, e))?;

    write_json(
        &out_file(cfg, "mi.json")?,
        &MiSummary {
            mi: mi.mi,
            n_samples: mi.n_samples,
            bins: mi.bins,
            lambda: model.config().lambda,
        },
    )?;
    let mut w = csv_writer(&out_file(cfg, "mi.csv")?)?;
    w.write_record(["sample_id", "global", "local"])?;
    for (s, (g, l)) in ds.samples.iter().zip(mi.global.iter().zip(&mi.local)) {
        w.write_record([s.id.clone(), g.to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| CliError::io(&cfg.paths.out_dir, e))?;

    let comparison = match compare {
        Some(path) => {
            let other = load_model(path)?;
            let c = MiComparison {
                this_checkpoint: cfg.paths.checkpoint.clone(),
                this_lambda: model.config().lambda,
                this_mi: mi.mi,
                other_checkpoint: path.to_path_buf(),
                other_lambda: other.config().lambda,
                other_mi: mi_diagnostic(&other, &ds)?.mi,
            };
            write_json(&out_file(cfg, "mi_compare.json")?, &c)?;
            Some(c)
        }
        None => None,
    };
    Ok(EvalOutcome {
        probe,
        swap,
        mi,
        comparison,
    })
}

#[derive(Serialize)]
struct ForecastSummary {
    horizon: usize,
    mse: f64,
    nll: f64,
    persistence_mse: f64,
    n_points: usize,
}

pub const FORECAST_COLUMNS: [&str; 7] =
    ["sample_id", "step", "actual", "predicted", "latent_std", "persistence", "feature"];

/// Predicts the last `horizon` windows (default `eval.horizon`) of every
/// sample from the rest.
pub fn cmd_forecast(cfg: &RunConfig, horizon: Option<usize>) -> Result<ForecastReport> {
    let model = load_model(&cfg.paths.checkpoint)?;
    let ds = load_data(cfg)?;
    let report = forecast_eval(&model, &ds, horizon.unwrap_or(cfg.eval.horizon))?;
    let mut w = csv_writer(&out_file(cfg, "forecast.csv")?)?;
    w.write_record(FORECAST_COLUMNS)?;
    for r in &report.rows {
        w.write_record([
            r.sample_id.clone(),
            r.step.to_string(),
            r.actual.to_string(),
            r.predicted.to_string(),
            r.latent_std.to_string(),
            r.persistence.to_string(),
            r.feature.to_string(),
        ])?;
    }
    w.flush().map_err(|e| CliError::io(&cfg.paths.out_dir, e))?;
    write_json(
        &out_file(cfg, "forecast.json")?,
        &ForecastSummary {
            horizon: report.horizon,
            mse: report.mse,
            nll: report.nll,
            persistence_mse: report.persistence_mse,
            n_points: report.n_points,
        },
    )?;
    Ok(report)
}

#[derive(Clone, Debug, Default)]
pub struct GenerateArgs {
    pub sample: String,
    /// Rows of the sweep; the first is the sample's own global mean.
    pub zg_steps: usize,
    /// End of the global sweep; defaults to the negated own mean.
    pub zg_to: Option<Vec<f64>>,
    /// Column sources of local latents; defaults to the sample itself and
    /// the first sample with a different local label.
    pub local_from: Option<Vec<String>>,
}

pub const GENERATE_COLUMNS: [&str; 7] = ["block_row", "block_col", "local_source", "zg", "feature", "step", "value"];

pub struct GenerateOutcome {
    pub path: PathBuf,
    pub rows: usize,
    pub cols: usize,
}

/// Decodes a grid of global values (rows) against local trajectories of
/// several samples (columns) as one long-format CSV.
pub fn cmd_generate(cfg: &RunConfig, args: &GenerateArgs) -> Result<GenerateOutcome> {
    let model = load_model(&cfg.paths.checkpoint)?;
    let ds = load_data(cfg)?;
    let delta = model.config().delta;
    let lookup = |id: &str| {
        ds.get(id)
            .ok_or_else(|| CliError::Invalid(format!("unknown sample id `{id}`")))
    };
    let source = lookup(&args.sample)?;
    if args.zg_steps == 0 {
        return Err(CliError::Invalid("zg-steps must be at least 1".into()));
    }
    let own = model.encode_global(&window_sample(source, delta)?)?.mean;
    let end = match &args.zg_to {
        Some(v) if v.len() != own.len() => {
            return Err(CliError::Invalid(format!(
                "zg-to has {} values, the global latent has {}",
                v.len(),
                own.len()
            )))
        }
        Some(v) => v.clone(),
        None => own.iter().map(|z| -z).collect(),
    };
    let ids = match &args.local_from {
        Some(ids) if ids.is_empty() => return Err(CliError::Invalid("local-from lists no samples".into())),
        Some(ids) => ids.clone(),
        None => {
            let mut ids = vec![source.id.clone()];
            if let Some(other) = ds.samples.iter().find(|s| s.local_label != source.local_label) {
                ids.push(other.id.clone());
            }
            ids
        }
    };
    let mut locals = Vec::with_capacity(ids.len());
    for id in &ids {
        let s = lookup(id)?;
        let zl: Vec<Vec<f64>> = model
            .encode_local(&window_sample(s, delta)?)?
            .into_iter()
            .map(|q| q.mean)
            .collect();
        locals.push((s.len(), zl));
    }

    let path = out_file(cfg, "generate.csv")?;
    let mut w = csv_writer(&path)?;
    w.write_record(GENERATE_COLUMNS)?;
    for r in 0..args.zg_steps {
        let frac = if args.zg_steps == 1 { 0.0 } else { r as f64 / (args.zg_steps - 1) as f64 };
        let zg: Vec<f64> = own.iter().zip(&end).map(|(a, b)| a + frac * (b - a)).collect();
        let zg_text = zg.iter().map(|z| z.to_string()).collect::<Vec<_>>().join(";");
        for (c, (id, (len, zl))) in ids.iter().zip(&locals).enumerate() {
            let series = model.generate(&zg, zl)?;
            for (f, feat) in series.iter().enumerate() {
                for (t, v) in feat.iter().take(*len).enumerate() {
                    w.write_record([
                        r.to_string(),
                        c.to_string(),
                        id.clone(),
                        zg_text.clone(),
                        f.to_string(),
                        t.to_string(),
                        v.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(GenerateOutcome {
        path,
        rows: args.zg_steps,
        cols: ids.len(),
    })
}

/// Settings of the model `gradcheck` differentiates.
pub fn gradcheck_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d: 1,
        delta: 5,
        d_g: 1,
        d_l: 1,
        hidden: 8,
        seed,
        ..ModelConfig::default()
    }
}

/// Compares backward-mode gradients of the full objective on a tiny model
/// and batch (four samples of four windows) against central differences.
/// `inject_fault` adds 1 to the first analytic entry of that parameter.
pub fn cmd_gradcheck(seed: u64, inject_fault: Option<&str>) -> Result<GradCheckReport> {
    let cfg = gradcheck_config(seed);
    let model = Model::new(cfg.clone())?;
    let ds = simulate(&SimSpec {
        n_samples: 4,
        length: 20,
        seed,
        ..SimSpec::default()
    })?;
    let windowed = window(&ds, cfg.delta)?;
    let refs: Vec<_> = windowed.iter().collect();
    let batch = Batch::new(&cfg, &refs, None)?;
    let noise = BatchNoise::draw(&cfg, refs.len(), windowed[0].n_windows, &mut ChaCha8Rng::seed_from_u64(seed));
    let loss = |g: &Graph, p: &BoundParams| Ok(loss_terms(&cfg, g, p, &batch, &noise)?.total);
    let mut grads = analytic_gradients(model.params(), &loss)?;
    if let Some(name) = inject_fault {
        let g = grads
            .get_mut(name)
            .ok_or_else(|| CliError::Invalid(format!("no parameter named `{name}`")))?;
        g[0] += 1.0;
    }
    Ok(compare_with_finite_differences(model.params(), &grads, GRADCHECK_STEP, loss)?)
}

/// Effective configuration as TOML.
pub fn cmd_config(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    out.write_all(cfg.to_toml()?.as_bytes())
        .map_err(|e| CliError::io("<stdout>", e))
}
