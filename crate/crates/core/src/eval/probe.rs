use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{window, Dataset};
use crate::diff::{AdamConfig, AdamState, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 16,
            epochs: 300,
            lr: 0.01,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub accuracy: f64,
    /// Test accuracy per class label.
    pub per_class: BTreeMap<u32, f64>,
    pub n_train: usize,
    pub n_test: usize,
    /// Set when every sample carries the same label.
    pub degenerate: bool,
}

/// Trains a two-layer classifier on `features` and reports held-out accuracy.
/// The split is a seeded shuffle of the sorted sample ids.
pub fn probe_features(
    task: &str,
    ids: &[String],
    features: &[Vec<f64>],
    labels: &[u32],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let n = ids.len();
    if features.len() != n || labels.len() != n {
        return Err(Error::shape("probe", format!("{n} ids, {} features, {} labels", features.len(), labels.len())));
    }
    let dim = features.first().map_or(0, Vec::len);
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::shape("probe", "features must be non-empty rows of equal length"));
    }
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(Error::invalid("test fraction must lie in (0, 1)"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_test = ((n as f64 * cfg.test_fraction).round() as usize).clamp(1, n.saturating_sub(1));
    if n < 2 {
        return Err(Error::invalid("probe needs at least two samples"));
    }
    let (test, train) = order.split_at(n_test);

    let classes: Vec<u32> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let class_of: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    if classes.len() == 1 {
        return Ok(ProbeReport {
            task: task.into(),
            accuracy: 1.0,
            per_class: [(classes[0], 1.0)].into_iter().collect(),
            n_train: train.len(),
            n_test,
            degenerate: true,
        });
    }

    // Standardize with training statistics.
    let stats: Vec<(f64, f64)> = (0..dim)
        .map(|k| {
            let m = train.iter().map(|&i| features[i][k]).sum::<f64>() / train.len() as f64;
            let v = train.iter().map(|&i| (features[i][k] - m).powi(2)).sum::<f64>() / train.len() as f64;
            (m, v.sqrt().max(1e-12))
        })
        .collect();
    let rows = |set: &[usize]| -> Vec<f64> {
        set.iter()
            .flat_map(|&i| features[i].iter().zip(&stats).map(|(x, (m, s))| (x - m) / s))
            .collect()
    };

    let c = classes.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut params = ParamStore::new();
    for (name, fan_in, fan_out) in [("l1", dim, cfg.hidden), ("l2", cfg.hidden, c)] {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rand::Rng::random_range(&mut rng, -a..=a)).collect();
        params.insert(format!("{name}.w"), vec![fan_in, fan_out], w)?;
        params.insert(format!("{name}.b"), vec![fan_out], vec![0.0; fan_out])?;
    }
    let forward = |g: &Graph, p: &crate::diff::BoundParams, x: &[f64], m: usize| -> Result<_> {
        let x = g.constant(&[m, dim], x.to_vec())?;
        let h = x.matmul(p.get("l1.w"))?.add(p.get("l1.b"))?.tanh();
        h.matmul(p.get("l2.w"))?.add(p.get("l2.b"))?.log_softmax()
    };

    let x_train = rows(train);
    let onehot: Vec<f64> = train
        .iter()
        .flat_map(|&i| {
            let y = class_of[&labels[i]];
            (0..c).map(move |k| if y == k { 1.0 } else { 0.0 })
        })
        .collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    for _ in 0..cfg.epochs {
        let g = Graph::new();
        let p = params.bind(&g);
        let logp = forward(&g, &p, &x_train, train.len())?;
        let target = g.constant(&[train.len(), c], onehot.clone())?;
        let loss = logp.mul(&target)?.sum().scale(-1.0 / train.len() as f64);
        loss.backward()?;
        adam.step(&mut params, &p.grads())?;
    }

    let g = Graph::new();
    let p = params.bind(&g);
    let logp = forward(&g, &p, &rows(test), test.len())?.value();
    let mut hits: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (r, &i) in test.iter().enumerate() {
        let row = &logp[r * c..(r + 1) * c];
        let pred = (0..c).max_by(|&a, &b| row[a].total_cmp(&row[b])).expect("c >= 2");
        let e = hits.entry(labels[i]).or_default();
        e.1 += 1;
        if pred == class_of[&labels[i]] {
            e.0 += 1;
        }
    }
    let correct: usize = hits.values().map(|h| h.0).sum();
    Ok(ProbeReport {
        task: task.into(),
        accuracy: correct as f64 / n_test as f64,
        per_class: hits.into_iter().map(|(k, (h, t))| (k, h as f64 / t as f64)).collect(),
        n_train: train.len(),
        n_test,
        degenerate: false,
    })
}

/// Probes the global posterior means for the global class labels.
pub fn probe_global(model: &Model, ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let labels = ds
        .global_labels()
        .ok_or_else(|| Error::invalid("every sample needs a global label to probe"))?;
    let mut ids = Vec::with_capacity(ds.len());
    let mut features = Vec::with_capacity(ds.len());
    for w in window(ds, model.config().delta)? {
        features.push(model.encode_global(&w)?.mean);
        ids.push(w.id);
    }
    probe_features("global_class", &ids, &features, &labels, cfg)
}
