use serde::{Deserialize, Serialize};

use super::{Dataset, TimeSeriesSample};
use crate::error::{Error, Result};

/// A sample cut into `⌈T/δ⌉` non-overlapping windows.
///
/// `values` and `mask` are laid out `[window][feature][offset]`. Masked
/// entries, including the padding after the last step, hold `0.0` in
/// `values` and `0.0` in `mask`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowedSample {
    pub id: String,
    pub n_features: usize,
    pub delta: usize,
    pub n_windows: usize,
    /// Length of the series before padding.
    pub len: usize,
    pub values: Vec<f64>,
    pub mask: Vec<f64>,
    pub global_label: Option<u32>,
    pub local_label: Option<u32>,
}

impl WindowedSample {
    /// Entries per window, `d·δ`.
    pub fn window_size(&self) -> usize {
        self.n_features * self.delta
    }

    /// Encoder input for window `w`: zero-filled values followed by the mask.
    pub fn window_input(&self, w: usize) -> Vec<f64> {
        let k = self.window_size();
        let mut row = self.values[w * k..(w + 1) * k].to_vec();
        row.extend_from_slice(&self.mask[w * k..(w + 1) * k]);
        row
    }

    pub fn window_observed(&self, w: usize) -> bool {
        let k = self.window_size();
        self.mask[w * k..(w + 1) * k].iter().any(|&m| m > 0.0)
    }

    /// Windows `start..start+count` as a new sample.
    pub fn windows(&self, start: usize, count: usize) -> Result<WindowedSample> {
        if count == 0 || start + count > self.n_windows {
            return Err(Error::invalid(format!(
                "windows {start}..{} of `{}` (has {})",
                start + count,
                self.id,
                self.n_windows
            )));
        }
        let k = self.window_size();
        let range = start * k..(start + count) * k;
        Ok(WindowedSample {
            id: self.id.clone(),
            n_features: self.n_features,
            delta: self.delta,
            n_windows: count,
            len: (self.len.saturating_sub(start * self.delta)).min(count * self.delta),
            values: self.values[range.clone()].to_vec(),
            mask: self.mask[range].to_vec(),
            global_label: self.global_label,
            local_label: self.local_label,
        })
    }

    /// Inverse of [`window_sample`]; masked entries come back as `0.0`.
    pub fn unwindow(&self) -> TimeSeriesSample {
        let mut values = vec![vec![0.0; self.len]; self.n_features];
        let mut mask = vec![vec![false; self.len]; self.n_features];
        for t in 0..self.len {
            let (w, o) = (t / self.delta, t % self.delta);
            for f in 0..self.n_features {
                let i = (w * self.n_features + f) * self.delta + o;
                values[f][t] = self.values[i];
                mask[f][t] = self.mask[i] > 0.0;
            }
        }
        TimeSeriesSample {
            id: self.id.clone(),
            values,
            mask,
            global_label: self.global_label,
            local_label: self.local_label,
        }
    }
}

pub fn window_sample(s: &TimeSeriesSample, delta: usize) -> Result<WindowedSample> {
    if delta == 0 {
        return Err(Error::invalid("window length must be at least 1"));
    }
    let (d, t) = (s.n_features(), s.len());
    let n_windows = t.div_ceil(delta);
    let mut values = vec![0.0; n_windows * d * delta];
    let mut mask = vec![0.0; n_windows * d * delta];
    for f in 0..d {
        for step in 0..t {
            if s.mask[f][step] {
                let i = ((step / delta) * d + f) * delta + step % delta;
                values[i] = s.values[f][step];
                mask[i] = 1.0;
            }
        }
    }
    Ok(WindowedSample {
        id: s.id.clone(),
        n_features: d,
        delta,
        n_windows,
        len: t,
        values,
        mask,
        global_label: s.global_label,
        local_label: s.local_label,
    })
}

pub fn window(ds: &Dataset, delta: usize) -> Result<Vec<WindowedSample>> {
    ds.samples.iter().map(|s| window_sample(s, delta)).collect()
}
