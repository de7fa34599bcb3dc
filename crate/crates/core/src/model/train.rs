use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{loss_terms, Batch, BatchNoise};
use super::{LossValues, Model, ModelConfig};
use crate::data::{window, Dataset, WindowedSample};
use crate::diff::{clip_grad_norm, AdamConfig, AdamState, Graph};
use crate::error::{Error, Result};

/// Sample-weighted means of the loss components over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub nll: f64,
    pub kl_local: f64,
    pub kl_global: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
}

pub fn train(ds: &Dataset, config: &ModelConfig) -> Result<(Model, TrainLog)> {
    train_with(ds, config, |_| {})
}

/// Mini-batch Adam on the full objective. Batches hold samples with equal
/// window counts. `on_epoch` sees each epoch's metrics as they are produced.
pub fn train_with(
    ds: &Dataset,
    config: &ModelConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Model, TrainLog)> {
    config.validate()?;
    if ds.n_features() != config.d {
        return Err(Error::invalid(format!(
            "dataset has {} features, model expects {}",
            ds.n_features(),
            config.d
        )));
    }
    let windowed = window(ds, config.delta)?;
    if windowed.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut buckets: BTreeMap<usize, Vec<&WindowedSample>> = BTreeMap::new();
    for w in &windowed {
        if !(0..w.n_windows).any(|i| w.window_observed(i)) {
            return Err(Error::invalid(format!("sample `{}` has no observed values", w.id)));
        }
        buckets.entry(w.n_windows).or_default().push(w);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::with_rng(config.clone(), &mut rng)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr));
    let mut log = TrainLog::default();

    for epoch in 1..=config.epochs {
        let mut batches: Vec<Vec<&WindowedSample>> = Vec::new();
        for members in buckets.values() {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            batches.extend(members.chunks(config.batch_size).map(<[_]>::to_vec));
        }
        batches.shuffle(&mut rng);

        let mut sums = [0.0; 5];
        let mut seen = 0usize;
        for (step, members) in batches.iter().enumerate() {
            let t = members[0].n_windows;
            let subwindows: Vec<(usize, usize)> = members
                .iter()
                .map(|_| draw_subwindow(config.subwindow, t, &mut rng))
                .collect();
            let batch = Batch::new(config, members, Some(&subwindows))?;
            let noise = BatchNoise::draw(config, members.len(), t, &mut rng);

            let g = Graph::new();
            let p = model.params().bind(&g);
            let terms = loss_terms(config, &g, &p, &batch, &noise)?;
            let v = LossValues::read(&terms);
            if !v.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            terms.total.backward()?;
            let mut grads = p.grads();
            if config.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, config.grad_clip);
            }
            adam.step(model.params_mut(), &grads)?;

            let n = members.len() as f64;
            for (s, x) in sums.iter_mut().zip([v.nll, v.kl_local, v.kl_global, v.reg, v.total]) {
                *s += n * x;
            }
            seen += members.len();
        }
        let m = sums.map(|s| s / seen as f64);
        let metrics = EpochMetrics {
            epoch,
            nll: m[0],
            kl_local: m[1],
            kl_global: m[2],
            reg: m[3],
            total: m[4],
        };
        on_epoch(&metrics);
        log.epochs.push(metrics);
    }
    Ok((model, log))
}

/// A random run of whole windows covering a uniform fraction of the sample.
fn draw_subwindow(range: [f64; 2], t: usize, rng: &mut impl Rng) -> (usize, usize) {
    let frac = if range[0] < range[1] {
        rng.random_range(range[0]..=range[1])
    } else {
        range[0]
    };
    let count = ((frac * t as f64).round() as usize).clamp(1, t);
    let start = rng.random_range(0..=t - count);
    (start, count)
}
