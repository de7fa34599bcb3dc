//! Properties of a model trained briefly on the simulated benchmark.

use std::sync::OnceLock;

use glrep::data::{simulate, window, Dataset, SimSpec};
use glrep::eval::fit_trend;
use glrep::model::{train, Model, ModelConfig, TrainLog};

fn trained() -> &'static (Dataset, Model, TrainLog) {
    static CELL: OnceLock<(Dataset, Model, TrainLog)> = OnceLock::new();
    CELL.get_or_init(|| {
        let ds = simulate(&SimSpec { n_samples: 200, seed: 3, ..SimSpec::default() }).unwrap();
        let cfg = ModelConfig { epochs: 250, seed: 3, ..ModelConfig::default() };
        let (model, log) = train(&ds, &cfg).unwrap();
        (ds, model, log)
    })
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn loss_decreases() {
    let (_, _, log) = trained();
    let first = log.epochs[0].total;
    // Median of the last ten epochs smooths the regularizer's spikes.
    let mut tail: Vec<f64> = log.epochs[log.epochs.len() - 10..].iter().map(|e| e.total).collect();
    tail.sort_by(f64::total_cmp);
    assert!(tail[5] <= first, "{} > {first}", tail[5]);
}

#[test]
fn global_latent_agrees_across_halves() {
    let (ds, model, _) = trained();
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for x in window(ds, 10).unwrap() {
        first.push(model.encode_global(&x.windows(0, 5).unwrap()).unwrap().mean[0]);
        second.push(model.encode_global(&x.windows(5, 5).unwrap()).unwrap().mean[0]);
    }
    let r = pearson(&first, &second);
    assert!(r > 0.8, "r = {r}");
}

#[test]
fn generating_from_posterior_means_reconstructs() {
    let (ds, model, _) = trained();
    let x = &window(ds, 10).unwrap()[0];
    let zl: Vec<Vec<f64>> = model.encode_local(x).unwrap().into_iter().map(|q| q.mean).collect();
    let zg = model.encode_global(x).unwrap().mean;
    assert_eq!(model.generate(&zg, &zl).unwrap(), model.reconstruct(x).unwrap());
    let s = &ds.samples[0];
    let rec = &model.reconstruct(x).unwrap()[0];
    let mse = rec.iter().zip(&s.values[0]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / rec.len() as f64;
    assert!(mse < 0.1, "reconstruction mse {mse}");
}

#[test]
fn global_latent_moves_the_level() {
    let (ds, model, _) = trained();
    let w = window(ds, 10).unwrap();
    let mean_zg = |g: u32| {
        let zs: Vec<f64> = w
            .iter()
            .filter(|x| x.global_label == Some(g))
            .map(|x| model.encode_global(x).unwrap().mean[0])
            .collect();
        zs.iter().sum::<f64>() / zs.len() as f64
    };
    let (z1, z2) = (mean_zg(1), mean_zg(2));
    let zl: Vec<Vec<f64>> = model.encode_local(&w[0]).unwrap().into_iter().map(|q| q.mean).collect();
    let level = |z: f64| {
        let s = &model.generate(&[z], &zl).unwrap()[0];
        fit_trend(s, None).unwrap().intercept + fit_trend(s, None).unwrap().slope * 49.5
    };
    // Class 1 sits below zero and class 2 above.
    assert!(level(z1) < level(z2), "{} vs {}", level(z1), level(z2));
}
