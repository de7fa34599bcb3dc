use serde::{Deserialize, Serialize};

use crate::data::{window, Dataset, WindowedSample};
use crate::error::{Error, Result};
use crate::gp::{gp_condition, ln_2pi};
use crate::model::Model;

/// One observed future measurement with its forecasts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub sample_id: String,
    pub step: usize,
    pub feature: usize,
    pub actual: f64,
    pub predicted: f64,
    /// Predictive standard deviation of the local latent at this window,
    /// root-mean-square over local dimensions.
    pub latent_std: f64,
    pub persistence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub horizon: usize,
    pub mse: f64,
    /// Unit-variance Gaussian NLL per observed point.
    pub nll: f64,
    pub persistence_mse: f64,
    pub n_points: usize,
    pub rows: Vec<ForecastRow>,
}

pub(crate) struct SampleForecast {
    /// `[window][feature][offset]` over the horizon.
    pub predicted: Vec<f64>,
    pub persistence: Vec<f64>,
    /// Per future window.
    pub latent_std: Vec<f64>,
}

/// Forecasts the last `horizon` windows of `x` from the ones before them.
pub(crate) fn forecast_sample(model: &Model, x: &WindowedSample, horizon: usize) -> Result<SampleForecast> {
    let cfg = model.config();
    if horizon == 0 {
        return Err(Error::invalid("forecast horizon must be at least 1 window"));
    }
    if horizon > x.n_windows {
        return Err(Error::invalid(format!(
            "horizon of {horizon} windows exceeds sample `{}` ({} windows)",
            x.id, x.n_windows
        )));
    }
    let n_hist = x.n_windows - horizon;
    let obs_times: Vec<f64> = (0..n_hist).map(|w| w as f64).collect();
    let query: Vec<f64> = (n_hist..x.n_windows).map(|w| w as f64).collect();

    let (history, local_means) = if n_hist > 0 {
        let h = x.windows(0, n_hist)?;
        let means: Vec<Vec<f64>> = model.encode_local(&h)?.into_iter().map(|q| q.mean).collect();
        (Some(h), means)
    } else {
        (None, vec![Vec::new(); cfg.d_l])
    };
    let z_global = match &history {
        Some(h) if (0..n_hist).any(|w| h.window_observed(w)) => model.encode_global(h)?.mean,
        _ => vec![0.0; cfg.d_g],
    };

    let mut z_future = Vec::with_capacity(cfg.d_l);
    let mut var = vec![0.0; horizon];
    for (kernel, means) in cfg.kernels.iter().zip(&local_means) {
        let c = gp_condition(kernel, &obs_times, means, &query, None)?;
        for (v, s) in var.iter_mut().zip(c.std()) {
            *v += s * s / cfg.d_l as f64;
        }
        z_future.push(c.mean);
    }
    let decoded = model.decode(&z_global, &z_future)?;

    let (d, delta) = (x.n_features, x.delta);
    let mut predicted = vec![0.0; horizon * d * delta];
    let mut persistence = vec![0.0; horizon * d * delta];
    for f in 0..d {
        for o in 0..delta {
            // Latest observed history value at this offset, else of the feature.
            let last = (0..n_hist)
                .rev()
                .map(|w| (w * d + f) * delta + o)
                .find(|&i| x.mask[i] > 0.0)
                .or_else(|| {
                    (0..n_hist * delta)
                        .rev()
                        .map(|t| ((t / delta) * d + f) * delta + t % delta)
                        .find(|&i| x.mask[i] > 0.0)
                })
                .map_or(0.0, |i| x.values[i]);
            for h in 0..horizon {
                let i = (h * d + f) * delta + o;
                predicted[i] = decoded[f][h * delta + o];
                persistence[i] = last;
            }
        }
    }
    Ok(SampleForecast {
        predicted,
        persistence,
        latent_std: var.into_iter().map(f64::sqrt).collect(),
    })
}

/// Holds out the last `horizon` windows of every sample, conditions the local
/// GP on the encoded history and decodes the predictive mean with the
/// history's global mean. Scores observed future entries only.
pub fn forecast_eval(model: &Model, ds: &Dataset, horizon: usize) -> Result<ForecastReport> {
    let mut rows = Vec::new();
    for x in window(ds, model.config().delta)? {
        let f = forecast_sample(model, &x, horizon)?;
        let n_hist = x.n_windows - horizon;
        let (d, delta) = (x.n_features, x.delta);
        for h in 0..horizon {
            for feat in 0..d {
                for o in 0..delta {
                    let step = (n_hist + h) * delta + o;
                    let src = ((n_hist + h) * d + feat) * delta + o;
                    if step >= x.len || x.mask[src] == 0.0 {
                        continue;
                    }
                    let i = (h * d + feat) * delta + o;
                    rows.push(ForecastRow {
                        sample_id: x.id.clone(),
                        step,
                        feature: feat,
                        actual: x.values[src],
                        predicted: f.predicted[i],
                        latent_std: f.latent_std[h],
                        persistence: f.persistence[i],
                    });
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid("no observed values inside the forecast horizon"));
    }
    let n = rows.len() as f64;
    let mse = rows.iter().map(|r| (r.predicted - r.actual).powi(2)).sum::<f64>() / n;
    let persistence_mse = rows.iter().map(|r| (r.persistence - r.actual).powi(2)).sum::<f64>() / n;
    Ok(ForecastReport {
        horizon,
        mse,
        nll: 0.5 * mse + 0.5 * ln_2pi(),
        persistence_mse,
        n_points: rows.len(),
        rows,
    })
}
