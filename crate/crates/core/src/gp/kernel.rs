use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::diff::{Matrix, Triangle};
use crate::error::{Error, Result};

/// Jitter added to kernel matrices before factorization.
pub const DEFAULT_JITTER: f64 = 1e-6;
/// Jitter used for the single retry when the default one is not enough.
pub const RETRY_JITTER: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Rbf,
    Cauchy,
    Periodic,
}

/// A stationary covariance function `k(Δ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub length_scale: f64,
    /// Only read by [`KernelKind::Periodic`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<f64>,
    #[serde(default = "unit")]
    pub variance: f64,
}

fn unit() -> f64 {
    1.0
}

impl KernelSpec {
    pub fn rbf(length_scale: f64) -> Self {
        KernelSpec {
            kind: KernelKind::Rbf,
            length_scale,
            period: None,
            variance: 1.0,
        }
    }

    pub fn cauchy(length_scale: f64) -> Self {
        KernelSpec {
            kind: KernelKind::Cauchy,
            length_scale,
            period: None,
            variance: 1.0,
        }
    }

    pub fn periodic(length_scale: f64, period: f64) -> Self {
        KernelSpec {
            kind: KernelKind::Periodic,
            length_scale,
            period: Some(period),
            variance: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.length_scale) {
            return Err(Error::invalid(format!(
                "kernel length scale must be positive, got {}",
                self.length_scale
            )));
        }
        if !positive(self.variance) {
            return Err(Error::invalid(format!(
                "kernel variance must be positive, got {}",
                self.variance
            )));
        }
        if self.kind == KernelKind::Periodic && !self.period.is_some_and(positive) {
            return Err(Error::invalid("periodic kernel needs a positive period"));
        }
        Ok(())
    }

    /// Covariance between two points `delta` apart.
    pub fn eval(&self, delta: f64) -> f64 {
        let l = self.length_scale;
        let s2 = self.variance;
        match self.kind {
            KernelKind::Rbf => s2 * (-delta * delta / (2.0 * l * l)).exp(),
            KernelKind::Cauchy => s2 / (1.0 + delta * delta / (l * l)),
            KernelKind::Periodic => {
                let p = self.period.unwrap_or(1.0);
                let s = (PI * delta.abs() / p).sin();
                s2 * (-2.0 * s * s / (l * l)).exp()
            }
        }
    }

    /// Cross-covariance matrix `K(a, b)`.
    pub fn cross(&self, a: &[f64], b: &[f64]) -> Matrix {
        Matrix::from_fn(a.len(), b.len(), |i, j| self.eval(a[i] - b[j]))
    }
}

/// The cross product of kernel kinds and length scales, one combination per
/// latent dimension in listed order. For `d_l = 8` with `[Rbf, Cauchy]` and
/// `[2, 1, 0.5, 0.25]` this yields RBF(2), RBF(1), …, Cauchy(0.25).
pub fn kernel_assignment(kinds: &[KernelKind], scales: &[f64], dims: usize) -> Result<Vec<KernelSpec>> {
    let combos: Vec<KernelSpec> = kinds
        .iter()
        .flat_map(|&kind| {
            scales.iter().map(move |&l| KernelSpec {
                kind,
                length_scale: l,
                period: None,
                variance: 1.0,
            })
        })
        .collect();
    if combos.is_empty() || kinds.contains(&KernelKind::Periodic) {
        return Err(Error::invalid(
            "kernel assignment needs non-periodic kinds and at least one scale",
        ));
    }
    Ok((0..dims).map(|j| combos[j % combos.len()]).collect())
}

/// `K + jitter·I` over `times`, with its lower Cholesky factor.
pub fn kernel_matrix(spec: &KernelSpec, times: &[f64], jitter: f64) -> Result<(Matrix, Matrix)> {
    spec.validate()?;
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("kernel grid must be strictly increasing"));
    }
    let mut k = spec.cross(times, times);
    k.add_diagonal(jitter);
    match k.cholesky() {
        Ok(l) => Ok((k, l)),
        Err(Error::NotPositiveDefinite { .. }) => Err(Error::KernelFactorization { jitter }),
        Err(e) => Err(e),
    }
}

/// Zero-mean GP prior for one latent dimension over window indices `0..n`.
#[derive(Clone, Debug)]
pub struct PriorDim {
    pub kernel: KernelSpec,
    pub jitter: f64,
    /// `K + jitter·I`.
    pub cov: Matrix,
    pub chol: Matrix,
    /// `L⁻ᵀ`, used to turn `tr(K⁻¹Σ)` and `μᵀK⁻¹μ` into squared norms.
    pub chol_inv_t: Matrix,
    /// `log det (K + jitter·I)`.
    pub log_det: f64,
}

impl PriorDim {
    /// Builds the prior with the default jitter, retrying once with a larger one.
    pub fn new(kernel: KernelSpec, n: usize) -> Result<Self> {
        let times: Vec<f64> = (0..n).map(|t| t as f64).collect();
        let (cov, chol, jitter) = match kernel_matrix(&kernel, &times, DEFAULT_JITTER) {
            Ok((k, l)) => (k, l, DEFAULT_JITTER),
            Err(Error::KernelFactorization { .. }) => {
                let (k, l) = kernel_matrix(&kernel, &times, RETRY_JITTER)?;
                (k, l, RETRY_JITTER)
            }
            Err(e) => return Err(e),
        };
        let chol_inv_t = chol.tri_inverse(Triangle::Lower)?.transpose();
        let log_det = 2.0 * (0..n).map(|i| chol[(i, i)].ln()).sum::<f64>();
        Ok(PriorDim {
            kernel,
            jitter,
            cov,
            chol,
            chol_inv_t,
            log_det,
        })
    }

    pub fn len(&self) -> usize {
        self.cov.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Independent GP priors, one per local latent dimension.
#[derive(Clone, Debug)]
pub struct GpPrior {
    pub dims: Vec<PriorDim>,
}

impl GpPrior {
    pub fn new(kernels: &[KernelSpec], n_windows: usize) -> Result<Self> {
        let dims = kernels
            .iter()
            .map(|k| PriorDim::new(*k, n_windows))
            .collect::<Result<_>>()?;
        Ok(GpPrior { dims })
    }

    pub fn n_windows(&self) -> usize {
        self.dims.first().map_or(0, PriorDim::len)
    }
}
