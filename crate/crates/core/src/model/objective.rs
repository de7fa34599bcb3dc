use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::nets::{decode, global_posterior, local_posterior};
use super::ModelConfig;
use crate::data::WindowedSample;
use crate::diff::{BoundParams, Graph, Tensor};
use crate::error::{Error, Result};
use crate::gp::{diag_gaussian_log_prob, kl_banded_to_gp, kl_global, ln_2pi, sample_banded, GpPrior};

/// Bound on the log density ratio before exponentiation.
pub const LOG_RATIO_CLAMP: f64 = 30.0;

/// Mean over observed entries of `½(x − x̂)² + ½ log 2π`, computed per row
/// of `[rows, k]` inputs; returns `[rows]`. Masked entries contribute
/// nothing, including to gradients.
pub fn nll_masked_rows(xhat: &Tensor, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let shape = xhat.shape();
    if shape.len() != 2 || x.shape() != shape || mask.shape() != shape {
        return Err(Error::shape(
            "nll_masked",
            format!("xhat {shape:?}, x {:?}, mask {:?}", x.shape(), mask.shape()),
        ));
    }
    let counts = mask.sum_axis(1)?;
    if let Some(r) = counts.value().iter().position(|&c| c == 0.0) {
        return Err(Error::invalid(format!("row {r} has no observed entries")));
    }
    let sq = xhat.sub(x)?.mul(mask)?.square().scale(0.5).sum_axis(1)?;
    Ok(sq.div(&counts)?.add_scalar(0.5 * ln_2pi()))
}

/// [`nll_masked_rows`] over all entries as one sample.
pub fn nll_masked(xhat: &Tensor, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let n = xhat.numel();
    let flat = |t: &Tensor| t.reshape(&[1, t.numel()]);
    if x.numel() != n || mask.numel() != n {
        return Err(Error::shape(
            "nll_masked",
            format!("xhat {:?}, x {:?}, mask {:?}", xhat.shape(), x.shape(), mask.shape()),
        ));
    }
    Ok(nll_masked_rows(&flat(xhat)?, &flat(x)?, &flat(mask)?)?.sum())
}

/// Samples sharing one window count, flattened for the networks.
#[derive(Clone, Debug)]
pub struct Batch {
    pub(crate) b: usize,
    pub(crate) t: usize,
    /// `[b·t, 2dδ]`: zero-filled values then mask.
    pub(crate) inputs: Vec<f64>,
    pub(crate) values: Vec<f64>,
    pub(crate) mask: Vec<f64>,
    /// `[b, b·t]` averaging over each sample's observed windows.
    pub(crate) pool_full: Vec<f64>,
    /// Same, restricted to the global encoder's sub-window.
    pub(crate) pool_sub: Vec<f64>,
    pub(crate) prior: GpPrior,
}

impl Batch {
    /// `subwindows[i] = (first window, window count)` for the global encoder;
    /// `None` lets it see every window.
    pub fn new(
        cfg: &ModelConfig,
        samples: &[&WindowedSample],
        subwindows: Option<&[(usize, usize)]>,
    ) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let (b, t) = (samples.len(), first.n_windows);
        let k = cfg.d * cfg.delta;
        let mut inputs = Vec::with_capacity(b * t * 2 * k);
        let mut values = Vec::with_capacity(b * t * k);
        let mut mask = Vec::with_capacity(b * t * k);
        let mut pool_full = vec![0.0; b * b * t];
        let mut pool_sub = vec![0.0; b * b * t];
        for (i, s) in samples.iter().enumerate() {
            if s.n_windows != t {
                return Err(Error::shape(
                    "batch",
                    format!("`{}` has {} windows, batch has {t}", s.id, s.n_windows),
                ));
            }
            if s.n_features != cfg.d || s.delta != cfg.delta {
                return Err(Error::shape(
                    "batch",
                    format!(
                        "`{}` is {} features x {} steps per window, model expects {} x {}",
                        s.id, s.n_features, s.delta, cfg.d, cfg.delta
                    ),
                ));
            }
            for w in 0..t {
                inputs.extend(s.window_input(w));
            }
            values.extend_from_slice(&s.values);
            mask.extend_from_slice(&s.mask);

            let observed: Vec<usize> = (0..t).filter(|&w| s.window_observed(w)).collect();
            if observed.is_empty() {
                return Err(Error::invalid(format!("sample `{}` has no observed values", s.id)));
            }
            fill_pool(&mut pool_full[i * b * t..], i * t, &observed);
            let sub: Vec<usize> = match subwindows {
                Some(sw) => {
                    let (start, count) = sw[i];
                    observed.iter().copied().filter(|w| (start..start + count).contains(w)).collect()
                }
                None => Vec::new(),
            };
            let sub = if sub.is_empty() { &observed } else { &sub };
            fill_pool(&mut pool_sub[i * b * t..], i * t, sub);
        }
        Ok(Batch {
            b,
            t,
            inputs,
            values,
            mask,
            pool_full,
            pool_sub,
            prior: GpPrior::new(&cfg.kernels, t)?,
        })
    }

    pub fn len(&self) -> usize {
        self.b
    }

    pub fn is_empty(&self) -> bool {
        self.b == 0
    }

    pub fn n_windows(&self) -> usize {
        self.t
    }
}

fn fill_pool(row: &mut [f64], offset: usize, windows: &[usize]) {
    let w = 1.0 / windows.len() as f64;
    for &i in windows {
        row[offset + i] = w;
    }
}

/// Standard-normal draws that make one evaluation of the objective
/// deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNoise {
    /// Per local dimension, `[b, t]`.
    pub local: Vec<Vec<f64>>,
    /// Reparameterization noise for `z_g`, `[b, d_g]`.
    pub global: Vec<f64>,
    /// Prior draws `z_g*`, `[b, d_g]`.
    pub prior: Vec<f64>,
}

impl BatchNoise {
    pub fn draw(cfg: &ModelConfig, b: usize, t: usize, rng: &mut impl Rng) -> Self {
        let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(rng)).collect() };
        BatchNoise {
            local: (0..cfg.d_l).map(|_| normal(b * t)).collect(),
            global: normal(b * cfg.d_g),
            prior: normal(b * cfg.d_g),
        }
    }
}

/// Batch means of every loss component.
#[derive(Clone, Debug)]
pub struct LossTerms {
    /// Negative log-likelihood of the observed entries of each sample.
    pub nll: Tensor,
    pub kl_local: Tensor,
    pub kl_global: Tensor,
    pub reg: Tensor,
    /// `nll + β(kl_local + kl_global)`.
    pub elbo: Tensor,
    /// `elbo + λ·reg`.
    pub total: Tensor,
}

/// Evaluates the full objective on `batch` with fixed `noise`.
pub fn loss_terms(
    cfg: &ModelConfig,
    g: &Graph,
    p: &BoundParams,
    batch: &Batch,
    noise: &BatchNoise,
) -> Result<LossTerms> {
    let (b, t) = (batch.b, batch.t);
    let rows = b * t;
    let k = cfg.d * cfg.delta;
    let inputs = g.constant(&[rows, 2 * k], batch.inputs.clone())?;
    let x = g.constant(&[rows, k], batch.values.clone())?;
    let mask = g.constant(&[rows, k], batch.mask.clone())?;

    let local = local_posterior(cfg, p, &inputs, b, t)?;
    let mut z_local = Vec::with_capacity(cfg.d_l);
    let mut kl_local = g.zeros(&[b]);
    for (j, q) in local.iter().enumerate() {
        let eps = g.constant(&[b, t], noise.local[j].clone())?;
        z_local.push(sample_banded(&q.mean, &q.diag, &q.off, &eps)?);
        kl_local = kl_local.add(&kl_banded_to_gp(&q.mean, &q.diag, &q.off, &batch.prior.dims[j])?)?;
    }

    let pool_sub = g.constant(&[b, rows], batch.pool_sub.clone())?;
    let (g_mean, g_log_var) = global_posterior(cfg, p, &inputs, &pool_sub)?;
    let eps = g.constant(&[b, cfg.d_g], noise.global.clone())?;
    let z_g = g_mean.add(&g_log_var.scale(0.5).exp().mul(&eps)?)?;
    let kl_g = kl_global(&g_mean, &g_log_var)?;

    // The likelihood term is the whole sample's negative log-likelihood: the
    // per-entry mean scaled back up by the number of observed entries.
    let xhat = decode(p, &z_local, &z_g, b, t)?;
    let flat_mask = mask.reshape(&[b, t * k])?;
    let nll = nll_masked_rows(&xhat.reshape(&[b, t * k])?, &x.reshape(&[b, t * k])?, &flat_mask)?
        .mul(&flat_mask.sum_axis(1)?)?;

    // Counterfactual: decode with a prior draw of the global latent, then ask
    // the global encoder which of the two global latents produced the result.
    let z_star = g.constant(&[b, cfg.d_g], noise.prior.clone())?;
    let x_star = decode(p, &z_local, &z_star, b, t)?.mul(&mask)?;
    let star_inputs = Tensor::concat(&[&x_star, &mask], 1)?;
    let pool_full = g.constant(&[b, rows], batch.pool_full.clone())?;
    let (s_mean, s_log_var) = global_posterior(cfg, p, &star_inputs, &pool_full)?;
    let log_ratio = diag_gaussian_log_prob(&z_g, &s_mean, &s_log_var)?
        .sub(&diag_gaussian_log_prob(&z_star, &s_mean, &s_log_var)?)?;
    let reg = log_ratio.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP).exp().mean();

    let elbo = nll.add(&kl_local.add(&kl_g)?.scale(cfg.beta))?.mean();
    let total = elbo.add(&reg.scale(cfg.lambda))?;
    Ok(LossTerms {
        nll: nll.mean(),
        kl_local: kl_local.mean(),
        kl_global: kl_g.mean(),
        reg,
        elbo,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &Graph, v: &[f64]) -> Tensor {
        g.constant(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn two_entry_example() {
        let g = Graph::new();
        let nll = nll_masked(&leaf(&g, &[1.0, 2.0]), &leaf(&g, &[0.0, 0.0]), &leaf(&g, &[1.0, 1.0])).unwrap();
        assert!((nll.item() - (1.25 + 0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn perfect_fit_costs_half_log_two_pi() {
        let g = Graph::new();
        let x = leaf(&g, &[0.3, -1.0, 4.0]);
        let nll = nll_masked(&x, &x, &leaf(&g, &[1.0, 1.0, 1.0])).unwrap();
        assert!((nll.item() - 0.5 * ln_2pi()).abs() < 1e-15);
    }

    #[test]
    fn masked_entry_has_no_gradient() {
        let g = Graph::new();
        let xhat = g.param(&[1, 3], vec![1.0, 5.0, -2.0]);
        let nll = nll_masked(&xhat, &leaf(&g, &[0.0, 0.0, 0.0]), &leaf(&g, &[1.0, 0.0, 1.0])).unwrap();
        assert!((nll.item() - (0.25 * 5.0 + 0.5 * ln_2pi())).abs() < 1e-12);
        nll.backward().unwrap();
        assert_eq!(xhat.grad().unwrap()[1], 0.0);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let g = Graph::new();
        let z = leaf(&g, &[0.0, 0.0]);
        assert!(nll_masked(&z, &z, &z).is_err());
    }
}
