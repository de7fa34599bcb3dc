use serde::{Deserialize, Serialize};

use super::kernel::{kernel_matrix, KernelSpec, DEFAULT_JITTER, RETRY_JITTER};
use crate::diff::Matrix;
use crate::error::{Error, Result};

/// Predictive distribution of a GP at query points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditional {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    /// Jitter that was actually used on the observed block.
    pub jitter: f64,
}

impl Conditional {
    pub fn std(&self) -> Vec<f64> {
        (0..self.mean.len())
            .map(|i| self.cov[(i, i)].max(0.0).sqrt())
            .collect()
    }
}

/// Conditions a zero-mean GP observed at `obs_times` on `query_times`:
/// `mean = K_*x K_xx⁻¹ z`, `cov = K_** − K_*x K_xx⁻¹ K_x*`.
///
/// `jitter = None` uses the default and retries once with a larger value.
pub fn gp_condition(
    kernel: &KernelSpec,
    obs_times: &[f64],
    obs_values: &[f64],
    query_times: &[f64],
    jitter: Option<f64>,
) -> Result<Conditional> {
    kernel.validate()?;
    if query_times.is_empty() {
        return Err(Error::invalid("no query points to condition on"));
    }
    if obs_times.len() != obs_values.len() {
        return Err(Error::shape(
            "gp_condition",
            format!("{} observation times, {} values", obs_times.len(), obs_values.len()),
        ));
    }
    if obs_values.iter().chain(obs_times).chain(query_times).any(|v| !v.is_finite()) {
        return Err(Error::invalid("conditioning inputs must be finite"));
    }
    let prior = kernel.cross(query_times, query_times);
    if obs_times.is_empty() {
        return Ok(Conditional {
            mean: vec![0.0; query_times.len()],
            cov: prior,
            jitter: 0.0,
        });
    }

    let (l, used) = match jitter {
        Some(j) => (kernel_matrix(kernel, obs_times, j)?.1, j),
        None => match kernel_matrix(kernel, obs_times, DEFAULT_JITTER) {
            Ok((_, l)) => (l, DEFAULT_JITTER),
            Err(Error::KernelFactorization { .. }) => {
                (kernel_matrix(kernel, obs_times, RETRY_JITTER)?.1, RETRY_JITTER)
            }
            Err(e) => return Err(e),
        },
    };

    let alpha = l.cholesky_solve(obs_values)?;
    let k_qx = kernel.cross(query_times, obs_times);
    let mean = k_qx.matvec(&alpha)?;

    // V = L⁻¹ K_xq, so K_*x K⁻¹ K_x* = VᵀV.
    let n = query_times.len();
    let mut v = Matrix::zeros(obs_times.len(), n);
    for q in 0..n {
        let col = l.tri_solve(k_qx.row(q), crate::diff::Triangle::Lower)?;
        for (i, c) in col.into_iter().enumerate() {
            v[(i, q)] = c;
        }
    }
    let reduction = v.transpose().matmul(&v)?;
    let cov = Matrix::from_fn(n, n, |i, j| {
        let c = prior[(i, j)] - reduction[(i, j)];
        if i == j {
            c.max(0.0)
        } else {
            c
        }
    });
    Ok(Conditional {
        mean,
        cov,
        jitter: used,
    })
}
