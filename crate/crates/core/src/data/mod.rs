//! Samples with missingness masks, the simulated benchmark, CSV I/O and
//! non-overlapping windowing.

mod csv_io;
mod sim;
mod window;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csv_io::{load_csv, save_csv, DatasetManifest};
pub use sim::{simulate, SimCell, SimSpec};
pub use window::{window, window_sample, WindowedSample};

/// One multivariate series. `values[f][t]` is feature `f` at step `t`;
/// `mask[f][t]` is true where the value was measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSample {
    pub id: String,
    pub values: Vec<Vec<f64>>,
    pub mask: Vec<Vec<bool>>,
    pub global_label: Option<u32>,
    pub local_label: Option<u32>,
}

impl TimeSeriesSample {
    /// A fully observed sample.
    pub fn observed(id: impl Into<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        let mask = values.iter().map(|row| vec![true; row.len()]).collect();
        let s = TimeSeriesSample {
            id: id.into(),
            values,
            mask,
            global_label: None,
            local_label: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn n_features(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if self.values.is_empty() {
            return Err(Error::invalid(format!("sample `{}` has no features", self.id)));
        }
        if self.mask.len() != self.values.len()
            || self.values.iter().any(|r| r.len() != t)
            || self.mask.iter().any(|r| r.len() != t)
        {
            return Err(Error::shape(
                "sample",
                format!("`{}`: ragged values or mask", self.id),
            ));
        }
        for (f, (vals, mask)) in self.values.iter().zip(&self.mask).enumerate() {
            if let Some(step) = (0..t).find(|&i| mask[i] && !vals[i].is_finite()) {
                return Err(Error::invalid(format!(
                    "sample `{}` feature {f} step {step}: observed value is not finite",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Copy of steps `start..start+len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::invalid(format!(
                "slice {start}..{} of `{}` exceeds length {}",
                start + len,
                self.id,
                self.len()
            )));
        }
        let cut = |rows: &Vec<Vec<f64>>| rows.iter().map(|r| r[start..start + len].to_vec()).collect();
        Ok(TimeSeriesSample {
            id: self.id.clone(),
            values: cut(&self.values),
            mask: self.mask.iter().map(|r| r[start..start + len].to_vec()).collect(),
            global_label: self.global_label,
            local_label: self.local_label,
        })
    }
}

/// A collection of samples sharing one feature layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub samples: Vec<TimeSeriesSample>,
}

impl Dataset {
    pub fn new(feature_names: Vec<String>, samples: Vec<TimeSeriesSample>) -> Result<Self> {
        let ds = Dataset {
            feature_names,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_names.len();
        let mut seen = std::collections::HashSet::new();
        for s in &self.samples {
            s.validate()?;
            if s.n_features() != d {
                return Err(Error::shape(
                    "dataset",
                    format!("`{}` has {} features, expected {d}", s.id, s.n_features()),
                ));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn max_len(&self) -> usize {
        self.samples.iter().map(TimeSeriesSample::len).max().unwrap_or(0)
    }

    pub fn get(&self, id: &str) -> Option<&TimeSeriesSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn global_labels(&self) -> Option<Vec<u32>> {
        self.samples.iter().map(|s| s.global_label).collect()
    }

    pub fn local_labels(&self) -> Option<Vec<u32>> {
        self.samples.iter().map(|s| s.local_label).collect()
    }
}
