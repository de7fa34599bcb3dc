use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::KernelSpec;

/// Architecture and optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of input features.
    pub d: usize,
    /// Window length in steps.
    pub delta: usize,
    pub d_g: usize,
    pub d_l: usize,
    /// Weight on both KL terms.
    pub beta: f64,
    /// Weight on the counterfactual regularizer.
    pub lambda: f64,
    /// One GP kernel per local dimension.
    pub kernels: Vec<KernelSpec>,
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Largest joint gradient norm per step; `0` disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Range of the fraction of a sample the global encoder sees per step.
    pub subwindow: [f64; 2],
}

impl Default for ModelConfig {
    /// Settings for the four-population simulated benchmark.
    fn default() -> Self {
        ModelConfig {
            d: 1,
            delta: 10,
            d_g: 1,
            d_l: 1,
            beta: 0.1,
            lambda: 2.0,
            kernels: vec![KernelSpec::rbf(1.0)],
            hidden: 32,
            lr: 0.01,
            batch_size: 32,
            epochs: 500,
            grad_clip: 10.0,
            seed: 0,
            subwindow: [0.25, 1.0],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.d == 0 || self.delta == 0 || self.d_g == 0 || self.d_l == 0 || self.hidden == 0 {
            return bad(format!(
                "d, delta, d_g, d_l and hidden must be at least 1 (got {}, {}, {}, {}, {})",
                self.d, self.delta, self.d_g, self.d_l, self.hidden
            ));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return bad(format!("gradient clip must be finite and >= 0, got {}", self.grad_clip));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.kernels.len() != self.d_l {
            return bad(format!(
                "{} kernels given for {} local dimensions",
                self.kernels.len(),
                self.d_l
            ));
        }
        for k in &self.kernels {
            k.validate()?;
        }
        let [lo, hi] = self.subwindow;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("sub-window range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"));
        }
        Ok(())
    }

    /// Input width of the window networks: values plus mask.
    pub(crate) fn window_input(&self) -> usize {
        2 * self.d * self.delta
    }
}
