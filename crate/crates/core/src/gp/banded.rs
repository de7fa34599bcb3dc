//! Gaussians whose precision is `BᵀB` with `B` upper bi-diagonal.
//!
//! Sampling, densities and the KL divergence to a GP prior all reduce to
//! `O(T)` bi-diagonal solves against `B`, so they stay differentiable
//! through [`Tensor::band_solve`]. The batched functions here take one row
//! per distribution: `mean` and `diag` are `[n, t]`, `off` is `[n, t-1]`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::kernel::PriorDim;
use crate::diff::{Graph, Matrix, Tensor};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// `N(μ, (BᵀB)⁻¹)` with `B[t][t] = diag[t]` and `B[t][t+1] = off[t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandedGaussian {
    pub mean: Vec<f64>,
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl BandedGaussian {
    pub fn new(mean: Vec<f64>, diag: Vec<f64>, off: Vec<f64>) -> Result<Self> {
        let t = mean.len();
        if diag.len() != t || off.len() != t.saturating_sub(1) {
            return Err(Error::shape(
                "banded_gaussian",
                format!(
                    "mean {t}, diag {}, off {} (expected {t}, {t}, {})",
                    diag.len(),
                    off.len(),
                    t.saturating_sub(1)
                ),
            ));
        }
        Ok(BandedGaussian { mean, diag, off })
    }

    /// Unit precision centered at `mean`.
    pub fn standard(mean: Vec<f64>) -> Self {
        let t = mean.len();
        BandedGaussian {
            mean,
            diag: vec![1.0; t],
            off: vec![0.0; t.saturating_sub(1)],
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    fn check_diag(&self) -> Result<()> {
        match self.diag.iter().position(|&d| d == 0.0) {
            Some(index) => Err(Error::Singular { index }),
            None => Ok(()),
        }
    }

    /// Dense `B`.
    pub fn band_matrix(&self) -> Matrix {
        let t = self.len();
        Matrix::from_fn(t, t, |i, j| {
            if i == j {
                self.diag[i]
            } else if j == i + 1 {
                self.off[i]
            } else {
                0.0
            }
        })
    }

    /// Dense precision `BᵀB` and covariance `(BᵀB)⁻¹ = B⁻¹B⁻ᵀ`.
    pub fn band_to_dense(&self) -> Result<(Matrix, Matrix)> {
        self.check_diag()?;
        let b = self.band_matrix();
        let bt = b.transpose();
        let mut precision = bt.matmul(&b)?;
        let b_inv = b.tri_inverse(crate::diff::Triangle::Upper)?;
        let mut covariance = b_inv.matmul(&b_inv.transpose())?;
        symmetrize(&mut precision);
        symmetrize(&mut covariance);
        Ok((precision, covariance))
    }

    fn tensors(&self, g: &Graph) -> Result<(Tensor, Tensor, Tensor)> {
        let t = self.len();
        Ok((
            g.constant(&[1, t], self.mean.clone())?,
            g.constant(&[1, t], self.diag.clone())?,
            g.constant(&[1, t.saturating_sub(1)], self.off.clone())?,
        ))
    }

    /// `μ + B⁻¹ε` for standard-normal `noise`.
    pub fn sample(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.len() {
            return Err(Error::shape(
                "sample_banded",
                format!("noise length {} for T = {}", noise.len(), self.len()),
            ));
        }
        let g = Graph::new();
        let (m, d, o) = self.tensors(&g)?;
        let eps = g.constant(&[1, self.len()], noise.to_vec())?;
        Ok(sample_banded(&m, &d, &o, &eps)?.value())
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.len() {
            return Err(Error::shape(
                "log_prob_banded",
                format!("x length {} for T = {}", x.len(), self.len()),
            ));
        }
        self.check_diag()?;
        let g = Graph::new();
        let (m, d, o) = self.tensors(&g)?;
        let x = g.constant(&[1, self.len()], x.to_vec())?;
        Ok(log_prob_banded(&m, &d, &o, &x)?.item())
    }

    /// `KL(self ‖ N(0, K))`.
    pub fn kl_to_prior(&self, prior: &PriorDim) -> Result<f64> {
        self.check_diag()?;
        let g = Graph::new();
        let (m, d, o) = self.tensors(&g)?;
        Ok(kl_banded_to_gp(&m, &d, &o, prior)?.item())
    }
}

fn symmetrize(m: &mut Matrix) {
    for i in 0..m.rows() {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn rows_and_len(mean: &Tensor) -> Result<(usize, usize)> {
    match mean.shape().as_slice() {
        [n, t] => Ok((*n, *t)),
        s => Err(Error::shape("banded", format!("expected [n, t], got {s:?}"))),
    }
}

/// Reparameterized draw `μ + B⁻¹ε`, one row per distribution.
pub fn sample_banded(mean: &Tensor, diag: &Tensor, off: &Tensor, noise: &Tensor) -> Result<Tensor> {
    mean.add(&Tensor::band_solve(diag, off, noise, false)?)
}

/// `B v` for each row, where `v` has shape `[n, t]`.
fn band_apply(diag: &Tensor, off: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (n, t) = rows_and_len(v)?;
    let main = diag.mul(v)?;
    if t < 2 {
        return Ok(main);
    }
    let upper = off.mul(&v.narrow(1, 1, t - 1)?)?;
    let pad = v.graph().zeros(&[n, 1]);
    main.add(&Tensor::concat(&[&upper, &pad], 1)?)
}

/// `Σᵢ log|dᵢ|` per row, shape `[n]`.
fn log_abs_det_band(diag: &Tensor) -> Result<Tensor> {
    diag.square().log().scale(0.5).sum_axis(1)
}

/// Log density `−½‖B(x−μ)‖² + Σ log|dᵢ| − (T/2) log 2π` per row, shape `[n]`.
pub fn log_prob_banded(mean: &Tensor, diag: &Tensor, off: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (_, t) = rows_and_len(mean)?;
    let r = band_apply(diag, off, &x.sub(mean)?)?;
    let quad = r.square().sum_axis(1)?.scale(-0.5);
    quad.add(&log_abs_det_band(diag)?)
        .map(|v| v.add_scalar(-0.5 * t as f64 * LN_2PI))
}

/// `KL(N(μ, (BᵀB)⁻¹) ‖ N(0, K))` per row, shape `[n]`:
/// `½[tr(K⁻¹Σ) + μᵀK⁻¹μ − T + log det K − log det Σ]`,
/// with `tr(K⁻¹Σ) = ‖B⁻ᵀL⁻ᵀ‖²_F` and `μᵀK⁻¹μ = ‖L⁻¹μ‖²`.
pub fn kl_banded_to_gp(mean: &Tensor, diag: &Tensor, off: &Tensor, prior: &PriorDim) -> Result<Tensor> {
    let (n, t) = rows_and_len(mean)?;
    if prior.len() != t {
        return Err(Error::shape(
            "kl_banded_to_gp",
            format!("posterior over {t} windows, prior over {}", prior.len()),
        ));
    }
    let g = mean.graph();
    let linv_t = prior.chol_inv_t.as_slice();
    let rhs = g.constant(&[n, t, t], linv_t.repeat(n))?;
    let trace = Tensor::band_solve(diag, off, &rhs, true)?
        .square()
        .sum_axis(2)?
        .sum_axis(1)?;
    let linv_t = g.constant(&[t, t], linv_t.to_vec())?;
    let quad = mean.matmul(&linv_t)?.square().sum_axis(1)?;
    // log det Σ = −2 Σ log|dᵢ|
    let log_det_sigma = log_abs_det_band(diag)?.scale(-2.0);
    Ok(trace
        .add(&quad)?
        .sub(&log_det_sigma)?
        .add_scalar(prior.log_det - t as f64)
        .scale(0.5))
}

/// `N(mean, diag(exp(log_var)))`, the posterior over the global latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GlobalGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::shape(
                "global_gaussian",
                format!("mean {} vs log-variance {}", mean.len(), log_var.len()),
            ));
        }
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::invalid("global posterior parameters must be finite"));
        }
        Ok(GlobalGaussian { mean, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `KL(self ‖ N(0, I))`.
    pub fn kl(&self) -> f64 {
        self.mean
            .iter()
            .zip(&self.log_var)
            .map(|(m, lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
            .sum()
    }

    pub fn log_prob(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(self.mean.iter().zip(&self.log_var))
            .map(|(z, (m, lv))| -0.5 * ((z - m).powi(2) / lv.exp() + lv + LN_2PI))
            .sum()
    }
}

/// `Σₖ ½(σₖ² + μₖ² − 1 − log σₖ²)` per row of `[n, d]` inputs, shape `[n]`.
pub fn kl_global(mean: &Tensor, log_var: &Tensor) -> Result<Tensor> {
    log_var
        .exp()
        .add(&mean.square())?
        .sub(log_var)?
        .add_scalar(-1.0)
        .scale(0.5)
        .sum_axis(1)
}

/// Diagonal-Gaussian log density per row, shape `[n]`.
pub fn diag_gaussian_log_prob(x: &Tensor, mean: &Tensor, log_var: &Tensor) -> Result<Tensor> {
    let z = x.sub(mean)?.square().div(&log_var.exp())?;
    z.add(log_var)?
        .add_scalar(LN_2PI)
        .scale(-0.5)
        .sum_axis(1)
}

/// `log 2π`, exposed for likelihood terms elsewhere.
pub fn ln_2pi() -> f64 {
    debug_assert!((LN_2PI - (2.0 * PI).ln()).abs() < 1e-15);
    LN_2PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::KernelSpec;

    #[test]
    fn identity_band() {
        let g = BandedGaussian::standard(vec![0.0; 3]);
        let (p, c) = g.band_to_dense().unwrap();
        assert_eq!(p, Matrix::identity(3));
        assert_eq!(c, Matrix::identity(3));
    }

    #[test]
    fn two_by_two_precision() {
        let g = BandedGaussian::new(vec![0.0; 2], vec![1.0, 1.0], vec![1.0]).unwrap();
        let (p, c) = g.band_to_dense().unwrap();
        assert_eq!(p, Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 2.0]]).unwrap());
        assert_eq!(p, p.transpose());
        assert_eq!(c, c.transpose());
        let eye = p.matmul(&c).unwrap();
        assert!(eye.max_abs_diff(&Matrix::identity(2)) < 1e-12);
    }

    #[test]
    fn singular_band_rejected() {
        let g = BandedGaussian::new(vec![0.0; 2], vec![1.0, 0.0], vec![0.5]).unwrap();
        assert!(matches!(g.band_to_dense(), Err(Error::Singular { index: 1 })));
        assert!(g.sample(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn identity_sample_adds_noise() {
        let g = BandedGaussian::standard(vec![1.0, -2.0, 0.5]);
        let s = g.sample(&[0.1, 0.2, -0.3]).unwrap();
        assert_eq!(s, vec![1.1, -1.8, 0.2]);
    }

    #[test]
    fn standard_normal_at_mode() {
        let g = BandedGaussian::standard(vec![0.0]);
        let lp = g.log_prob(&[0.0]).unwrap();
        assert!((lp + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
        assert!((lp + 0.9189).abs() < 1e-4);
    }

    #[test]
    fn independent_case_sums_univariate_densities() {
        let g = BandedGaussian::new(vec![0.5, -1.0], vec![2.0, 0.5], vec![0.0]).unwrap();
        let x = [1.0, 0.0];
        let expected: f64 = (0..2)
            .map(|i| {
                let sd = 1.0 / g.diag[i];
                let z = (x[i] - g.mean[i]) / sd;
                -0.5 * z * z - sd.ln() - 0.5 * (2.0 * PI).ln()
            })
            .sum();
        assert!((g.log_prob(&x).unwrap() - expected).abs() < 1e-13);
    }

    #[test]
    fn kl_of_prior_to_itself_is_zero() {
        // Choose B so that BᵀB = K⁻¹ exactly: for T = 1, b = 1/√k.
        let prior = PriorDim::new(KernelSpec::rbf(1.0), 1).unwrap();
        let b = 1.0 / prior.cov[(0, 0)].sqrt();
        let q = BandedGaussian::new(vec![0.0], vec![b], vec![]).unwrap();
        assert!(q.kl_to_prior(&prior).unwrap().abs() < 1e-9);
    }

    #[test]
    fn scalar_kl_closed_form() {
        let mut prior = PriorDim::new(KernelSpec::rbf(1.0), 1).unwrap();
        // Force the prior to exactly N(0, 1).
        prior.cov = Matrix::identity(1);
        prior.chol = Matrix::identity(1);
        prior.chol_inv_t = Matrix::identity(1);
        prior.log_det = 0.0;
        let q = BandedGaussian::standard(vec![1.0]);
        assert!((q.kl_to_prior(&prior).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn global_kl_values() {
        assert_eq!(GlobalGaussian::new(vec![0.0], vec![0.0]).unwrap().kl(), 0.0);
        assert_eq!(GlobalGaussian::new(vec![1.0], vec![0.0]).unwrap().kl(), 0.5);
        let two = GlobalGaussian::new(vec![1.0, 0.3], vec![0.0, -0.7]).unwrap();
        let a = GlobalGaussian::new(vec![1.0], vec![0.0]).unwrap().kl();
        let b = GlobalGaussian::new(vec![0.3], vec![-0.7]).unwrap().kl();
        assert!((two.kl() - (a + b)).abs() < 1e-15);

        let g = Graph::new();
        let m = g.constant(&[1, 2], two.mean.clone()).unwrap();
        let lv = g.constant(&[1, 2], two.log_var.clone()).unwrap();
        assert!((kl_global(&m, &lv).unwrap().item() - two.kl()).abs() < 1e-15);
    }

    #[test]
    fn diag_log_prob_matches_struct() {
        let gg = GlobalGaussian::new(vec![0.2, -1.0], vec![0.3, -0.4]).unwrap();
        let z = [0.7, -0.1];
        let g = Graph::new();
        let x = g.constant(&[1, 2], z.to_vec()).unwrap();
        let m = g.constant(&[1, 2], gg.mean.clone()).unwrap();
        let lv = g.constant(&[1, 2], gg.log_var.clone()).unwrap();
        let lp = diag_gaussian_log_prob(&x, &m, &lv).unwrap().item();
        assert!((lp - gg.log_prob(&z)).abs() < 1e-14);
    }

    fn random_band(t: usize, seed: u64) -> BandedGaussian {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        BandedGaussian::new(
            (0..t).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..t).map(|_| rng.random_range(0.6..1.8)).collect(),
            (0..t - 1).map(|_| rng.random_range(-0.7..0.7)).collect(),
        )
        .unwrap()
    }

    fn dense_log_det(m: &Matrix) -> f64 {
        let l = m.cholesky().unwrap();
        2.0 * (0..m.rows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    #[test]
    fn log_prob_matches_dense_precision() {
        let q = random_band(5, 1);
        let (prec, _) = q.band_to_dense().unwrap();
        let x = [0.3, -0.1, 0.9, 0.0, -1.2];
        let r: Vec<f64> = x.iter().zip(&q.mean).map(|(a, b)| a - b).collect();
        let pr = prec.matvec(&r).unwrap();
        let quad: f64 = r.iter().zip(&pr).map(|(a, b)| a * b).sum();
        let want = -0.5 * quad + 0.5 * dense_log_det(&prec) - 2.5 * (2.0 * PI).ln();
        assert!((q.log_prob(&x).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn kl_matches_dense_formula() {
        let t = 6;
        let q = random_band(t, 2);
        let prior = PriorDim::new(KernelSpec::cauchy(1.3), t).unwrap();
        let (_, sigma) = q.band_to_dense().unwrap();
        let l = &prior.chol;
        let mut trace = 0.0;
        for j in 0..t {
            let col: Vec<f64> = (0..t).map(|i| sigma[(i, j)]).collect();
            trace += l.cholesky_solve(&col).unwrap()[j];
        }
        let kinv_mu = l.cholesky_solve(&q.mean).unwrap();
        let quad: f64 = q.mean.iter().zip(&kinv_mu).map(|(a, b)| a * b).sum();
        let want = 0.5 * (trace + quad - t as f64 + dense_log_det(&prior.cov) - dense_log_det(&sigma));
        let got = q.kl_to_prior(&prior).unwrap();
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
        assert!(got > 0.0);
    }

    #[test]
    fn sample_moments_match_covariance() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let t = 3;
        let q = random_band(t, 3);
        let (_, sigma) = q.band_to_dense().unwrap();
        let n = 200_000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f64> = (0..n * t).map(|_| StandardNormal.sample(&mut rng)).collect();
        let g = Graph::new();
        let m = g.constant(&[n, t], q.mean.repeat(n)).unwrap();
        let d = g.constant(&[n, t], q.diag.repeat(n)).unwrap();
        let o = g.constant(&[n, t - 1], q.off.repeat(n)).unwrap();
        let e = g.constant(&[n, t], noise).unwrap();
        let s = sample_banded(&m, &d, &o, &e).unwrap().value();
        for i in 0..t {
            let mean_i = (0..n).map(|k| s[k * t + i]).sum::<f64>() / n as f64;
            let se = (sigma[(i, i)] / n as f64).sqrt();
            assert!((mean_i - q.mean[i]).abs() < 3.0 * se, "mean {i}");
            for j in 0..t {
                let mean_j = (0..n).map(|k| s[k * t + j]).sum::<f64>() / n as f64;
                let cov = (0..n)
                    .map(|k| (s[k * t + i] - mean_i) * (s[k * t + j] - mean_j))
                    .sum::<f64>()
                    / (n - 1) as f64;
                // Var of a sample covariance entry: (Σᵢᵢ Σⱼⱼ + Σᵢⱼ²) / n.
                let se = ((sigma[(i, i)] * sigma[(j, j)] + sigma[(i, j)].powi(2)) / n as f64).sqrt();
                assert!((cov - sigma[(i, j)]).abs() < 3.0 * se, "cov {i},{j}");
            }
        }
    }

    #[test]
    fn banded_ops_pass_gradient_check() {
        use crate::diff::{grad_check, ParamStore};
        let t = 4;
        let q = random_band(t, 5);
        let mut p = ParamStore::new();
        p.insert("mu", vec![2, t], [q.mean.clone(), q.diag.clone()].concat()).unwrap();
        p.insert("raw", vec![2, t], q.diag.iter().map(|d| d.ln()).collect::<Vec<_>>().repeat(2)).unwrap();
        p.insert("off", vec![2, t - 1], q.off.repeat(2)).unwrap();
        p.insert("gm", vec![2, 2], vec![0.1, -0.4, 0.3, 0.2]).unwrap();
        p.insert("glv", vec![2, 2], vec![0.2, -0.3, 0.0, 0.5]).unwrap();
        let prior = PriorDim::new(KernelSpec::rbf(1.0), t).unwrap();
        let report = grad_check(&p, 1e-6, |g, b| {
            let (mu, off) = (b.get("mu"), b.get("off"));
            let diag = b.get("raw").exp();
            let eps = g.constant(&[2, t], vec![0.5, -1.0, 0.2, 0.8, -0.3, 0.1, 1.1, -0.6])?;
            let z = sample_banded(mu, &diag, off, &eps)?;
            let lp = log_prob_banded(mu, &diag, off, &z.scale(0.9))?;
            let kl = kl_banded_to_gp(mu, &diag, off, &prior)?;
            let gk = kl_global(&b.get("gm"), &b.get("glv"))?;
            let gl = diag_gaussian_log_prob(&b.get("gm").scale(0.5), &b.get("gm"), &b.get("glv"))?;
            Ok(lp.add(&kl)?.add(&gk)?.add(&gl)?.add(&z.square().sum_axis(1)?)?.sum())
        })
        .unwrap();
        assert!(report.passes(1e-5), "{report:?}");
    }
}
