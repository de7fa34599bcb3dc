//! Parameter layout and the three networks.
//!
//! Window rows are laid out `[sample][window]`: row `b·T + t` holds window
//! `t` of sample `b`.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::ModelConfig;
use crate::diff::{BoundParams, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Lower bound added to the banded diagonal so the precision stays invertible.
pub(crate) const DIAG_FLOOR: f64 = 1e-3;
/// Range the global log-variance is clamped to.
pub(crate) const LOG_VAR_RANGE: (f64, f64) = (-12.0, 8.0);

fn dense_layers(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let (h, inp) = (cfg.hidden, cfg.window_input());
    vec![
        ("enc_local.l1".into(), inp, h),
        ("enc_local.l2".into(), h, h),
        ("enc_local.agg".into(), 3 * h, 3 * cfg.d_l),
        ("enc_global.l1".into(), inp, h),
        ("enc_global.l2".into(), h, h),
        ("enc_global.head".into(), h, h),
        ("enc_global.out".into(), h, 2 * cfg.d_g),
        ("dec.l1".into(), cfg.d_l + cfg.d_g, h),
        ("dec.l2".into(), h, h),
        ("dec.out".into(), h, cfg.d * cfg.delta),
    ]
}

/// Glorot-uniform weights and zero biases. The band head starts small so
/// the first posteriors are close to independent unit-scale windows.
pub(crate) fn init_params(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, fan_in, fan_out) in dense_layers(cfg) {
        let gain = if name == "enc_local.agg" { 0.1 } else { 1.0 };
        let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).map_err(|e| Error::invalid(e.to_string()))?;
        let w = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        store.insert(format!("{name}.w"), vec![fan_in, fan_out], w)?;
        store.insert(format!("{name}.b"), vec![fan_out], vec![0.0; fan_out])?;
    }
    Ok(store)
}

/// Checks that `store` has exactly the layout `cfg` implies.
pub(crate) fn check_layout(cfg: &ModelConfig, store: &ParamStore) -> Result<()> {
    let layers = dense_layers(cfg);
    if store.len() != 2 * layers.len() {
        return Err(Error::invalid(format!(
            "expected {} parameter arrays, found {}",
            2 * layers.len(),
            store.len()
        )));
    }
    for (name, fan_in, fan_out) in layers {
        for (suffix, shape) in [("w", vec![fan_in, fan_out]), ("b", vec![fan_out])] {
            let key = format!("{name}.{suffix}");
            match store.get(&key) {
                Some(p) if p.shape == shape => {}
                Some(p) => {
                    return Err(Error::shape(
                        "checkpoint",
                        format!("`{key}` has shape {:?}, expected {shape:?}", p.shape),
                    ))
                }
                None => return Err(Error::invalid(format!("missing parameter `{key}`"))),
            }
        }
    }
    if !store.all_finite() {
        return Err(Error::invalid("parameters contain non-finite values"));
    }
    Ok(())
}

fn dense(x: &Tensor, p: &BoundParams, name: &str) -> Result<Tensor> {
    x.matmul(p.get(&format!("{name}.w")))?
        .add(p.get(&format!("{name}.b")))
}

/// Two tanh layers applied to every window row independently.
fn window_mlp(x: &Tensor, p: &BoundParams, prefix: &str) -> Result<Tensor> {
    let h = dense(x, p, &format!("{prefix}.l1"))?.tanh();
    Ok(dense(&h, p, &format!("{prefix}.l2"))?.tanh())
}

/// Column `col` of a `[b·t, k]` tensor as `[b, len]`, windows `0..len`.
fn column_by_sample(x: &Tensor, b: usize, t: usize, k: usize, col: usize, len: usize) -> Result<Tensor> {
    let flat = x.reshape(&[b * t * k, 1])?;
    let rows: Vec<Option<usize>> = (0..b)
        .flat_map(|s| (0..len).map(move |w| Some((s * t + w) * k + col)))
        .collect();
    flat.gather_rows(&rows)?.reshape(&[b, len])
}

/// Banded posterior parameters for one local dimension, each row a sample.
pub(crate) struct LocalParams {
    pub mean: Tensor,
    pub diag: Tensor,
    pub off: Tensor,
}

/// Window embeddings followed by a width-3 aggregation over neighbouring
/// windows, producing mean, diagonal and off-diagonal per local dimension.
pub(crate) fn local_posterior(
    cfg: &ModelConfig,
    p: &BoundParams,
    inputs: &Tensor,
    b: usize,
    t: usize,
) -> Result<Vec<LocalParams>> {
    if t == 0 {
        return Err(Error::invalid("cannot encode a sample with no windows"));
    }
    let h = window_mlp(inputs, p, "enc_local")?;
    let prev: Vec<Option<usize>> = (0..b * t).map(|r| (r % t > 0).then(|| r - 1)).collect();
    let next: Vec<Option<usize>> = (0..b * t).map(|r| (r % t + 1 < t).then(|| r + 1)).collect();
    let ctx = Tensor::concat(&[&h.gather_rows(&prev)?, &h, &h.gather_rows(&next)?], 1)?;
    let out = dense(&ctx, p, "enc_local.agg")?;
    let k = 3 * cfg.d_l;
    (0..cfg.d_l)
        .map(|j| {
            let diag = column_by_sample(&out, b, t, k, cfg.d_l + j, t)?
                .softplus()
                .add_scalar(DIAG_FLOOR);
            // Tying |off| below diag bounds the growth of B⁻¹ along the chain.
            let ratio = column_by_sample(&out, b, t, k, 2 * cfg.d_l + j, t - 1)?.tanh();
            let off = diag.narrow(1, 0, t - 1)?.mul(&ratio)?;
            Ok(LocalParams {
                mean: column_by_sample(&out, b, t, k, j, t)?,
                diag,
                off,
            })
        })
        .collect()
}

/// Pools window embeddings with the `[b, rows]` weight matrix `pool` and
/// maps the result to `(mean, log_var)`, each `[b, d_g]`.
pub(crate) fn global_posterior(
    cfg: &ModelConfig,
    p: &BoundParams,
    inputs: &Tensor,
    pool: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let h = window_mlp(inputs, p, "enc_global")?;
    let pooled = pool.matmul(&h)?;
    let h = dense(&pooled, p, "enc_global.head")?.tanh();
    let out = dense(&h, p, "enc_global.out")?;
    let (lo, hi) = LOG_VAR_RANGE;
    Ok((
        out.narrow(1, 0, cfg.d_g)?,
        out.narrow(1, cfg.d_g, cfg.d_g)?.clamp(lo, hi),
    ))
}

/// Decodes every window from `[z_t ; z_g]`. `z_local` holds one `[b, t]`
/// tensor per local dimension, `z_global` is `[b, d_g]`. Output `[b·t, d·δ]`.
pub(crate) fn decode(
    p: &BoundParams,
    z_local: &[Tensor],
    z_global: &Tensor,
    b: usize,
    t: usize,
) -> Result<Tensor> {
    let mut cols = z_local
        .iter()
        .map(|z| z.reshape(&[b * t, 1]))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<Option<usize>> = (0..b * t).map(|r| Some(r / t)).collect();
    cols.push(z_global.gather_rows(&rows)?);
    let z = Tensor::concat(&cols.iter().collect::<Vec<_>>(), 1)?;
    let h = dense(&z, p, "dec.l1")?.tanh();
    let h = dense(&h, p, "dec.l2")?.tanh();
    dense(&h, p, "dec.out")
}

