use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub slope: f64,
    pub intercept: f64,
}

/// Ordinary least squares of `values[i]` on `i`, over entries where `observed`
/// is true (all entries when `observed` is `None`).
pub fn fit_trend(values: &[f64], observed: Option<&[bool]>) -> Result<Trend> {
    if let Some(m) = observed {
        if m.len() != values.len() {
            return Err(Error::shape("fit_trend", format!("{} values, {} mask entries", values.len(), m.len())));
        }
    }
    let points: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .filter(|(i, _)| observed.is_none_or(|m| m[*i]))
        .map(|(i, &v)| (i as f64, v))
        .collect();
    if points.len() < 2 {
        return Err(Error::invalid(format!("trend needs at least 2 observed points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let tm = points.iter().map(|p| p.0).sum::<f64>() / n;
    let xm = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(t, x)| (t - tm) * (x - xm)).sum();
    let sxx: f64 = points.iter().map(|(t, _)| (t - tm).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(Trend {
        slope,
        intercept: xm - slope * tm,
    })
}

/// Periodogram of the detrended series over bins `1..=n/2`; entry `k - 1`
/// is the power at `k` cycles per record.
pub fn periodogram(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 8 {
        return Err(Error::invalid(format!("periodogram needs at least 8 points, got {}", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("periodogram input must be finite"));
    }
    let trend = fit_trend(values, None)?;
    let mut buf: Vec<Complex<f64>> = values
        .iter()
        .enumerate()
        .map(|(i, v)| Complex::new(v - trend.intercept - trend.slope * i as f64, 0.0))
        .collect();
    let n = buf.len();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    Ok(buf[1..=n / 2].iter().map(|c| c.norm_sqr() / n as f64).collect())
}

/// Number of cycles per record with the most power after removing the
/// linear trend.
pub fn dominant_frequency(values: &[f64]) -> Result<usize> {
    let power = periodogram(values)?;
    let scale = values.iter().map(|v| v * v).sum::<f64>().max(1.0);
    let (k, &best) = power
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least 4 bins");
    if best <= 1e-20 * scale {
        return Err(Error::invalid("series has no oscillating component after detrending"));
    }
    Ok(k + 1)
}
