use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, TimeSeriesSample};
use crate::error::{Error, Result};

/// Parameters of one (global class, local class) population:
/// `x(t) = alpha * (gamma*t + a*sin(b*t / 2π) + c) + noise`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimCell {
    pub gamma: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub alpha: f64,
}

impl SimCell {
    pub fn eval(&self, t: f64) -> f64 {
        self.alpha * (self.gamma * t + self.a * (self.b * t / std::f64::consts::TAU).sin() + self.c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    /// `cells[g][l]` for global class `g + 1` and local class `l + 1`.
    pub cells: [[SimCell; 2]; 2],
    pub noise_std: f64,
    pub n_samples: usize,
    pub length: usize,
    pub dt: f64,
    pub seed: u64,
}

impl Default for SimSpec {
    fn default() -> Self {
        let cell = |gamma, c, a, b, alpha| SimCell {
            gamma,
            a,
            b,
            c,
            alpha,
        };
        SimSpec {
            cells: [
                [cell(0.05, -1.5, 1.8, 40.0, 0.5), cell(0.05, -1.5, 0.8, 20.0, 0.8)],
                [cell(-0.05, 1.5, 1.8, 40.0, 0.5), cell(-0.05, 1.5, 0.8, 20.0, 0.8)],
            ],
            noise_std: 0.1,
            n_samples: 500,
            length: 100,
            dt: 0.1,
            seed: 0,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || !self.n_samples.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "sample count must be a positive multiple of 4 for balanced classes, got {}",
                self.n_samples
            )));
        }
        if self.length == 0 {
            return Err(Error::invalid("series length must be at least 1"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::invalid("noise std must be finite and non-negative"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::invalid("time step must be positive"));
        }
        Ok(())
    }

    pub fn cell(&self, global: u32, local: u32) -> &SimCell {
        &self.cells[global as usize - 1][local as usize - 1]
    }
}

/// Draws a balanced, shuffled dataset of the four populations with labels
/// `global_label, local_label ∈ {1, 2}`.
pub fn simulate(spec: &SimSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut classes: Vec<(u32, u32)> = (0..spec.n_samples)
        .map(|i| ((i % 4) as u32 / 2 + 1, (i % 2) as u32 + 1))
        .collect();
    classes.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let width = spec.n_samples.to_string().len();

    let samples = classes
        .into_iter()
        .enumerate()
        .map(|(i, (g, l))| {
            let cell = spec.cell(g, l);
            let values = (0..spec.length)
                .map(|k| cell.eval(k as f64 * spec.dt) + noise.sample(&mut rng))
                .collect();
            TimeSeriesSample {
                id: format!("sim{i:0width$}"),
                values: vec![values],
                mask: vec![vec![true; spec.length]],
                global_label: Some(g),
                local_label: Some(l),
            }
        })
        .collect();
    Dataset::new(vec!["x".into()], samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless() -> SimSpec {
        SimSpec {
            noise_std: 0.0,
            n_samples: 8,
            ..SimSpec::default()
        }
    }

    #[test]
    fn first_point_of_first_cell() {
        assert_eq!(SimSpec::default().cell(1, 1).eval(0.0), -0.75);
    }

    #[test]
    fn global_classes_mirror_trend_and_intercept() {
        let s = SimSpec::default();
        for l in 1..=2 {
            let (a, b) = (s.cell(1, l), s.cell(2, l));
            assert_eq!(a.gamma, -b.gamma);
            assert_eq!(a.c, -b.c);
            assert_eq!((a.a, a.b, a.alpha), (b.a, b.b, b.alpha));
        }
    }

    #[test]
    fn noiseless_samples_follow_formula_exactly() {
        let spec = noiseless();
        let ds = simulate(&spec).unwrap();
        for s in &ds.samples {
            let cell = spec.cell(s.global_label.unwrap(), s.local_label.unwrap());
            for (k, &v) in s.values[0].iter().enumerate() {
                assert_eq!(v, cell.eval(k as f64 * spec.dt));
            }
        }
    }

    #[test]
    fn default_size_and_balance() {
        let ds = simulate(&SimSpec::default()).unwrap();
        assert_eq!(ds.len(), 500);
        assert!(ds.samples.iter().all(|s| s.len() == 100 && s.n_observed() == 100));
        for g in 1..=2 {
            for l in 1..=2 {
                let n = ds
                    .samples
                    .iter()
                    .filter(|s| s.global_label == Some(g) && s.local_label == Some(l))
                    .count();
                assert_eq!(n, 125);
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = SimSpec {
            n_samples: 12,
            ..SimSpec::default()
        };
        assert_eq!(simulate(&spec).unwrap(), simulate(&spec).unwrap());
        let other = SimSpec { seed: 1, ..spec.clone() };
        assert_ne!(simulate(&spec).unwrap(), simulate(&other).unwrap());
    }

    #[test]
    fn unbalanced_count_rejected() {
        let spec = SimSpec {
            n_samples: 10,
            ..SimSpec::default()
        };
        assert!(matches!(simulate(&spec), Err(Error::Invalid(_))));
    }
}
