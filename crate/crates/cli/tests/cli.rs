use std::path::Path;
use std::process::{Command, Output};

fn glrep(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glrep"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = glrep(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(String::from).collect()
}

const SMALL: [&str; 4] = ["--set", "sim.n_samples=52", "--epochs", "4"];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    SMALL.iter().copied().chain(args.iter().copied()).collect()
}

fn trained_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &with_small(&["simulate"]));
    ok(dir.path(), &with_small(&["train"]));
    dir
}

#[test]
fn simulate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["--set", "sim.n_samples=8", "simulate"]);
    ok(b.path(), &["--set", "sim.n_samples=8", "simulate"]);
    for f in ["data/sim.csv", "data/sim.manifest.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn default_simulation_is_500_by_100() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["simulate"]);
    assert!(out.contains("500 samples x 100 steps"), "{out}");
}

#[test]
fn unbalanced_sample_count_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = glrep(dir.path(), &["--set", "sim.n_samples=6", "simulate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("data/sim.csv").exists());
}

#[test]
fn bad_arguments_and_keys_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(glrep(dir.path(), &["--bogus"]).status.code(), Some(1));
    assert_eq!(glrep(dir.path(), &["--set", "model.nope=1", "config"]).status.code(), Some(1));
    assert_eq!(glrep(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--set", "sim.n_samples=8", "simulate"]);
    let out = glrep(dir.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn config_dump_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let dumped = ok(dir.path(), &["--seed", "9", "--lambda", "0", "config"]);
    std::fs::write(dir.path().join("run.toml"), &dumped).unwrap();
    assert_eq!(ok(dir.path(), &["--config", "run.toml", "config"]), dumped);
    assert!(dumped.contains("lambda = 0.0"));
}

#[test]
fn train_writes_metrics_and_reproducible_checkpoint() {
    let dir = trained_dir();
    let p = dir.path();
    assert_eq!(header(&p.join("runs/metrics.csv")), ["nll", "kl_local", "kl_global", "reg", "total"]);
    let rows = csv::Reader::from_path(p.join("runs/metrics.csv")).unwrap().records().count();
    assert_eq!(rows, 4);
    let digest = glrep_cli::file_digest(&p.join("runs/model.json")).unwrap();
    let metrics = std::fs::read(p.join("runs/metrics.csv")).unwrap();
    let out = ok(p, &with_small(&["train"]));
    assert!(out.contains(&digest), "{out}");
    assert_eq!(std::fs::read(p.join("runs/metrics.csv")).unwrap(), metrics);
    let log = std::fs::read_to_string(p.join("runs/train.log")).unwrap();
    assert!(log.starts_with("# unix time "));
}

#[test]
fn eval_writes_reports_and_comparison() {
    let dir = trained_dir();
    let p = dir.path();
    ok(p, &with_small(&["--lambda", "0", "--set", "paths.checkpoint=runs/l0.json", "--set", "paths.out_dir=l0", "train"]));
    let out = ok(p, &with_small(&["eval", "--compare", "runs/l0.json"]));
    assert!(out.contains("mi lambda=2 "), "{out}");
    assert!(out.contains("vs lambda=0 "), "{out}");
    for f in ["probe.json", "swap.json", "swap.csv", "mi.json", "mi.csv", "mi_compare.json"] {
        assert!(p.join("runs").join(f).exists(), "{f}");
    }
    let first = std::fs::read(p.join("runs/probe.json")).unwrap();
    ok(p, &with_small(&["eval"]));
    assert_eq!(std::fs::read(p.join("runs/probe.json")).unwrap(), first);
}

#[test]
fn forecast_csv_has_comparison_columns() {
    let dir = trained_dir();
    let p = dir.path();
    ok(p, &["forecast"]);
    let h = header(&p.join("runs/forecast.csv"));
    assert_eq!(h[..6], ["sample_id", "step", "actual", "predicted", "latent_std", "persistence"]);
    // Two windows of ten steps per sample.
    let rows = csv::Reader::from_path(p.join("runs/forecast.csv")).unwrap().records().count();
    assert_eq!(rows, 52 * 20);
    assert_eq!(glrep(p, &["forecast", "--horizon", "11"]).status.code(), Some(1));
}

#[test]
fn generate_sweeps_a_grid() {
    let dir = trained_dir();
    let p = dir.path();
    ok(p, &["generate", "--sample", "sim00", "--zg-steps", "3"]);
    let mut r = csv::Reader::from_path(p.join("runs/generate.csv")).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["block_row", "block_col", "local_source", "zg", "feature", "step", "value"]);
    let mut blocks = std::collections::BTreeSet::new();
    let mut first_block = Vec::new();
    for rec in r.records() {
        let rec = rec.unwrap();
        blocks.insert((rec[0].to_string(), rec[1].to_string()));
        if &rec[0] == "0" && &rec[1] == "0" {
            first_block.push(rec[6].parse::<f64>().unwrap());
        }
    }
    assert_eq!(blocks.len(), 6);

    // The sweep starts at the sample's own posterior mean: a reconstruction.
    let model = glrep::model::Model::load(&p.join("runs/model.json")).unwrap();
    let ds = glrep::data::load_csv(&p.join("data/sim.csv")).unwrap();
    let x = glrep::data::window_sample(ds.get("sim00").unwrap(), 10).unwrap();
    assert_eq!(first_block, model.reconstruct(&x).unwrap()[0]);

    assert_eq!(glrep(p, &["generate", "--sample", "nobody"]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_catches_a_planted_fault() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck"]);
    assert!(out.contains("PASS") && out.contains("threshold 1e-3"), "{out}");
    let bad = glrep(dir.path(), &["gradcheck", "--inject-fault", "dec.out.b"]);
    assert_eq!(bad.status.code(), Some(2));
    let text = String::from_utf8_lossy(&bad.stdout);
    assert!(text.contains("FAIL") && text.contains("worst dec.out.b[0]"), "{text}");
}
