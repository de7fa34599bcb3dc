use serde::{Deserialize, Serialize};

use crate::data::{window, Dataset};
use crate::error::{Error, Result};
use crate::model::Model;

/// Bins per axis of the equal-mass histogram.
pub const MI_BINS: usize = 16;
/// Fewest samples the histogram estimate accepts.
pub const MI_MIN_SAMPLES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiReport {
    /// Estimated mutual information in nats.
    pub mi: f64,
    pub n_samples: usize,
    pub bins: usize,
    /// Per-sample summaries the estimate was computed from.
    pub global: Vec<f64>,
    pub local: Vec<f64>,
}

/// Rank-based bin index in `0..bins` for every value; ties share the bin of
/// their first occurrence in sorted order.
fn equal_mass_bins(x: &[f64], bins: usize) -> Vec<usize> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut out = vec![0; n];
    let mut rank = 0;
    for (pos, &i) in order.iter().enumerate() {
        if pos == 0 || x[i] != x[order[pos - 1]] {
            rank = pos;
        }
        out[i] = rank * bins / n;
    }
    out
}

/// Plug-in mutual information between two scalar samples from a
/// `bins × bins` equal-mass histogram.
pub fn mutual_information(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("mutual_information", format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < MI_MIN_SAMPLES {
        return Err(Error::invalid(format!(
            "mutual information needs at least {MI_MIN_SAMPLES} samples, got {}",
            a.len()
        )));
    }
    if bins == 0 || a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("mutual information needs finite inputs and at least one bin"));
    }
    let (ba, bb) = (equal_mass_bins(a, bins), equal_mass_bins(b, bins));
    let n = a.len() as f64;
    let mut joint = vec![0.0; bins * bins];
    let (mut pa, mut pb) = (vec![0.0; bins], vec![0.0; bins]);
    for (&i, &j) in ba.iter().zip(&bb) {
        joint[i * bins + j] += 1.0 / n;
        pa[i] += 1.0 / n;
        pb[j] += 1.0 / n;
    }
    let mut mi = 0.0;
    for i in 0..bins {
        for j in 0..bins {
            let p = joint[i * bins + j];
            if p > 0.0 {
                mi += p * (p / (pa[i] * pb[j])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Projection of each row onto the leading principal direction.
pub fn first_principal_component(rows: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::shape("first_principal_component", "rows must be non-empty and equal length"));
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    if d == 1 {
        return Ok(rows.iter().map(|r| r[0] - mean[0]).collect());
    }
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
            }
        }
    }
    // Power iteration from a fixed start so results are reproducible.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + i as f64 * 1e-3).collect();
    for _ in 0..500 {
        let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| cov[i * d + j] * v[j]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        v = w.into_iter().map(|x| x / norm).collect();
    }
    Ok(rows
        .iter()
        .map(|r| r.iter().zip(&mean).zip(&v).map(|((x, m), e)| (x - m) * e).sum())
        .collect())
}

/// Histogram MI between the global posterior means and the time-averaged
/// local posterior means, each reduced to one number per sample.
pub fn mi_diagnostic(model: &Model, ds: &Dataset) -> Result<MiReport> {
    if ds.len() < MI_MIN_SAMPLES {
        return Err(Error::invalid(format!(
            "MI diagnostic needs at least {MI_MIN_SAMPLES} samples, got {}",
            ds.len()
        )));
    }
    let mut g_rows = Vec::with_capacity(ds.len());
    let mut l_rows = Vec::with_capacity(ds.len());
    for w in window(ds, model.config().delta)? {
        g_rows.push(model.encode_global(&w)?.mean);
        l_rows.push(
            model
                .encode_local(&w)?
                .iter()
                .map(|q| q.mean.iter().sum::<f64>() / q.len() as f64)
                .collect(),
        );
    }
    let global = first_principal_component(&g_rows)?;
    let local = first_principal_component(&l_rows)?;
    Ok(MiReport {
        mi: mutual_information(&global, &local, MI_BINS)?,
        n_samples: ds.len(),
        bins: MI_BINS,
        global,
        local,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn bins_hold_equal_mass() {
        let x = normals(160, 1);
        let b = equal_mass_bins(&x, 16);
        for k in 0..16 {
            assert_eq!(b.iter().filter(|&&v| v == k).count(), 10);
        }
    }

    #[test]
    fn independent_inputs_give_small_mi() {
        let n = 4000;
        let mi = mutual_information(&normals(n, 2), &normals(n, 3), 16).unwrap();
        // Plug-in bias is about (bins - 1)^2 / (2n).
        assert!(mi < 3.0 * 225.0 / (2.0 * n as f64), "{mi}");
    }

    #[test]
    fn copy_saturates_at_log_bins() {
        let x = normals(1600, 4);
        let mi = mutual_information(&x, &x, 16).unwrap();
        assert!((mi - 16f64.ln()).abs() < 1e-12, "{mi}");
    }

    #[test]
    fn symmetric_and_nonnegative() {
        let a = normals(300, 5);
        let b: Vec<f64> = a.iter().zip(normals(300, 6)).map(|(x, e)| x + 0.5 * e).collect();
        let ab = mutual_information(&a, &b, 16).unwrap();
        let ba = mutual_information(&b, &a, 16).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab > 0.0);
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(mutual_information(&normals(49, 7), &normals(49, 8), 16).is_err());
    }

    #[test]
    fn principal_direction_of_a_line() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let pc = first_principal_component(&rows).unwrap();
        let expected = 5f64.sqrt() * (19.0 - 9.5);
        assert!((pc[19].abs() - expected).abs() < 1e-9);
    }
}
