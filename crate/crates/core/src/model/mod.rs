//! The model: a banded-Gaussian local encoder with GP priors over windows,
//! a pooled global encoder, a window decoder, and the training objective
//! with its counterfactual regularizer.

mod config;
mod nets;
mod objective;
mod train;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowedSample;
use crate::diff::{Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::gp::{BandedGaussian, GlobalGaussian};

pub use config::ModelConfig;
pub use objective::{loss_terms, nll_masked, nll_masked_rows, Batch, BatchNoise, LossTerms, LOG_RATIO_CLAMP};
pub use train::{train, train_with, EpochMetrics, TrainLog};

const CHECKPOINT_FORMAT: &str = "glrep-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Loss components as plain numbers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub nll: f64,
    pub kl_local: f64,
    pub kl_global: f64,
    pub reg: f64,
    pub elbo: f64,
    pub total: f64,
}

impl LossValues {
    fn read(t: &LossTerms) -> Self {
        LossValues {
            nll: t.nll.item(),
            kl_local: t.kl_local.item(),
            kl_global: t.kl_global.item(),
            reg: t.reg.item(),
            elbo: t.elbo.item(),
            total: t.total.item(),
        }
    }
}

/// One counterfactual draw for a single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Counterfactual {
    pub source_id: String,
    /// Sampled local trajectory, `d_l × T_w`.
    pub z_local: Vec<Vec<f64>>,
    /// Draw from the global posterior of the source.
    pub z_global: Vec<f64>,
    /// Draw from the standard-normal prior.
    pub z_global_prior: Vec<f64>,
    /// `decode(z_global_prior, z_local)`, `d × (T_w·δ)`.
    pub series: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    params: ParamStore,
}

/// A configured model and its parameters. Inference methods take `&self`
/// and build a private graph per call.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = nets::init_params(&config, rng)?;
        Ok(Model { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        nets::check_layout(&config, &params)?;
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Evaluates every loss component once.
    pub fn loss(&self, batch: &Batch, noise: &BatchNoise) -> Result<LossValues> {
        let g = Graph::new();
        let p = self.params.bind(&g);
        Ok(LossValues::read(&loss_terms(&self.config, &g, &p, batch, noise)?))
    }

    fn check_sample(&self, x: &WindowedSample) -> Result<()> {
        if x.n_features != self.config.d || x.delta != self.config.delta {
            return Err(Error::shape(
                "encode",
                format!(
                    "sample `{}` is {} features x {} steps per window, model expects {} x {}",
                    x.id, x.n_features, x.delta, self.config.d, self.config.delta
                ),
            ));
        }
        if x.n_windows == 0 {
            return Err(Error::invalid(format!("sample `{}` has no windows", x.id)));
        }
        Ok(())
    }

    fn inputs(&self, g: &Graph, x: &WindowedSample) -> Result<Tensor> {
        let rows: Vec<f64> = (0..x.n_windows).flat_map(|w| x.window_input(w)).collect();
        g.constant(&[x.n_windows, self.config.window_input()], rows)
    }

    /// Joint posterior over the windows, one banded Gaussian per local dimension.
    pub fn encode_local(&self, x: &WindowedSample) -> Result<Vec<BandedGaussian>> {
        self.check_sample(x)?;
        let g = Graph::new();
        let p = self.params.bind(&g);
        let q = nets::local_posterior(&self.config, &p, &self.inputs(&g, x)?, 1, x.n_windows)?;
        q.iter()
            .map(|q| BandedGaussian::new(q.mean.value(), q.diag.value(), q.off.value()))
            .collect()
    }

    /// Posterior over the global latent from every observed window of `x`.
    /// Pass a slice from [`WindowedSample::windows`] to encode a sub-window.
    pub fn encode_global(&self, x: &WindowedSample) -> Result<GlobalGaussian> {
        self.check_sample(x)?;
        let observed: Vec<usize> = (0..x.n_windows).filter(|&w| x.window_observed(w)).collect();
        if observed.is_empty() {
            return Err(Error::invalid(format!("sample `{}` is entirely masked", x.id)));
        }
        let g = Graph::new();
        let p = self.params.bind(&g);
        let mut pool = vec![0.0; x.n_windows];
        for &w in &observed {
            pool[w] = 1.0 / observed.len() as f64;
        }
        let pool = g.constant(&[1, x.n_windows], pool)?;
        let (m, lv) = nets::global_posterior(&self.config, &p, &self.inputs(&g, x)?, &pool)?;
        GlobalGaussian::new(m.value(), lv.value())
    }

    /// Generates a series from a global latent and a local trajectory
    /// (`z_local[j][t]`). Returns `d × (T_w·δ)`.
    pub fn decode(&self, z_global: &[f64], z_local: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.config;
        let t = z_local.first().map_or(0, Vec::len);
        if z_global.len() != cfg.d_g || z_local.len() != cfg.d_l || t == 0 || z_local.iter().any(|z| z.len() != t) {
            return Err(Error::shape(
                "decode",
                format!(
                    "z_g of length {} and {} local rows; model has d_g = {}, d_l = {} and needs at least one window",
                    z_global.len(),
                    z_local.len(),
                    cfg.d_g,
                    cfg.d_l
                ),
            ));
        }
        let g = Graph::new();
        let p = self.params.bind(&g);
        let zl = z_local
            .iter()
            .map(|z| g.constant(&[1, t], z.clone()))
            .collect::<Result<Vec<_>>>()?;
        let zg = g.constant(&[1, cfg.d_g], z_global.to_vec())?;
        let out = nets::decode(&p, &zl, &zg, 1, t)?.value();
        Ok(unwindow_rows(&out, cfg.d, cfg.delta, t))
    }

    /// Alias of [`Model::decode`] for sweeps over latents.
    pub fn generate(&self, z_global: &[f64], z_local: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.decode(z_global, z_local)
    }

    /// Decodes the posterior means of `x`.
    pub fn reconstruct(&self, x: &WindowedSample) -> Result<Vec<Vec<f64>>> {
        let zl: Vec<Vec<f64>> = self.encode_local(x)?.into_iter().map(|q| q.mean).collect();
        self.decode(&self.encode_global(x)?.mean, &zl)
    }

    /// Draws `(Z_l, z_g, z_g*)` for `x` and decodes `X* = decode(z_g*, Z_l)`.
    pub fn counterfactual(&self, x: &WindowedSample, rng: &mut impl Rng) -> Result<Counterfactual> {
        let normal = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<f64> {
            (0..n).map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng)).collect()
        };
        let q_local = self.encode_local(x)?;
        let q_global = self.encode_global(x)?;
        let z_local = q_local
            .iter()
            .map(|q| q.sample(&normal(rng, x.n_windows)))
            .collect::<Result<Vec<_>>>()?;
        let z_global = q_global
            .mean
            .iter()
            .zip(&q_global.log_var)
            .zip(normal(rng, self.config.d_g))
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let z_global_prior = normal(rng, self.config.d_g);
        let series = self.decode(&z_global_prior, &z_local)?;
        Ok(Counterfactual {
            source_id: x.id.clone(),
            z_local,
            z_global,
            z_global_prior,
            series,
        })
    }

    /// Writes config and parameters as versioned JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &ckpt)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        Model::from_parts(ckpt.config, ckpt.params)
    }
}

/// `[t, d·δ]` decoder rows back to `d × (t·δ)`.
fn unwindow_rows(rows: &[f64], d: usize, delta: usize, t: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|f| {
            (0..t * delta)
                .map(|s| rows[(s / delta * d + f) * delta + s % delta])
                .collect()
        })
        .collect()
}
