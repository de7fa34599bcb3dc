use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::signal::{dominant_frequency, fit_trend};
use crate::data::{window, Dataset, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::model::Model;

/// One generated series `Dec(Z_l of source, z_g of partner)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapRow {
    pub source_id: String,
    pub partner_id: String,
    pub source_local: u32,
    pub partner_global: u32,
    pub slope: f64,
    /// `None` when the generated series has no oscillation left.
    pub frequency: Option<usize>,
    pub slope_ok: bool,
    pub frequency_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapReport {
    pub slope_agreement: f64,
    pub frequency_preservation: f64,
    /// Sign of the median data slope per global class.
    pub class_slope_sign: BTreeMap<u32, f64>,
    /// Median dominant bin of the data per local class.
    pub class_frequency: BTreeMap<u32, f64>,
    pub rows: Vec<SwapRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn labels(s: &TimeSeriesSample) -> Result<(u32, u32)> {
    match (s.global_label, s.local_label) {
        (Some(g), Some(l)) => Ok((g, l)),
        _ => Err(Error::invalid(format!("sample `{}` needs both global and local labels", s.id))),
    }
}

/// Per-class references measured on the data itself, first feature only.
fn references(ds: &Dataset) -> Result<(BTreeMap<u32, f64>, BTreeMap<u32, f64>)> {
    let mut slopes: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut bins: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for s in &ds.samples {
        let (g, l) = labels(s)?;
        slopes.entry(g).or_default().push(fit_trend(&s.values[0], Some(&s.mask[0]))?.slope);
        if s.mask[0].iter().all(|&m| m) {
            if let Ok(k) = dominant_frequency(&s.values[0]) {
                bins.entry(l).or_default().push(k as f64);
            }
        }
    }
    let sign = slopes.into_iter().map(|(g, v)| (g, median(v).signum())).collect();
    let freq: BTreeMap<u32, f64> = bins.into_iter().map(|(l, v)| (l, median(v))).collect();
    if freq.is_empty() {
        return Err(Error::invalid("no fully observed sample to measure reference frequencies"));
    }
    Ok((sign, freq))
}

/// Local class whose reference bin is strictly nearest to `k`.
fn nearest_class(k: usize, refs: &BTreeMap<u32, f64>) -> Option<u32> {
    let mut dist: Vec<(f64, u32)> = refs.iter().map(|(&l, &r)| ((k as f64 - r).abs(), l)).collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0));
    match dist.as_slice() {
        [only] => Some(only.1),
        [a, b, ..] if a.0 < b.0 => Some(a.1),
        _ => None,
    }
}

/// Scores `Dec(Z_l^i, z_g^j)` for each `(i, j)` index pair into `ds.samples`,
/// using posterior means. Slope and frequency are read from the first feature
/// over the source sample's length.
pub fn swap_eval_pairs(model: &Model, ds: &Dataset, pairs: &[(usize, usize)]) -> Result<SwapReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("no sample pairs to swap"));
    }
    let (class_slope_sign, class_frequency) = references(ds)?;
    let windowed = window(ds, model.config().delta)?;
    let mut global_means: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut rows = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let (src, partner) = match (ds.samples.get(i), ds.samples.get(j)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::invalid(format!("pair ({i}, {j}) out of range for {} samples", ds.len()))),
        };
        let (_, source_local) = labels(src)?;
        let (partner_global, _) = labels(partner)?;
        let zg = match global_means.get(&j) {
            Some(z) => z.clone(),
            None => {
                let z = model.encode_global(&windowed[j])?.mean;
                global_means.insert(j, z.clone());
                z
            }
        };
        let zl: Vec<Vec<f64>> = model.encode_local(&windowed[i])?.into_iter().map(|q| q.mean).collect();
        let mut series = model.decode(&zg, &zl)?.swap_remove(0);
        series.truncate(src.len());

        let slope = fit_trend(&series, None)?.slope;
        let frequency = dominant_frequency(&series).ok();
        let slope_ok = class_slope_sign
            .get(&partner_global)
            .is_some_and(|&s| s != 0.0 && slope.signum() == s);
        let frequency_ok = frequency.and_then(|k| nearest_class(k, &class_frequency)) == Some(source_local);
        rows.push(SwapRow {
            source_id: src.id.clone(),
            partner_id: partner.id.clone(),
            source_local,
            partner_global,
            slope,
            frequency,
            slope_ok,
            frequency_ok,
        });
    }
    let rate = |f: fn(&SwapRow) -> bool| rows.iter().filter(|r| f(r)).count() as f64 / rows.len() as f64;
    Ok(SwapReport {
        slope_agreement: rate(|r| r.slope_ok),
        frequency_preservation: rate(|r| r.frequency_ok),
        class_slope_sign,
        class_frequency,
        rows,
    })
}

/// Pairs every sample with a seeded random partner from a different global
/// class and scores the swapped generations.
pub fn counterfactual_swap_eval(model: &Model, ds: &Dataset, seed: u64) -> Result<SwapReport> {
    let globals = ds
        .global_labels()
        .ok_or_else(|| Error::invalid("every sample needs a global label for swap evaluation"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(ds.len());
    for (i, &g) in globals.iter().enumerate() {
        let others: Vec<usize> = (0..ds.len()).filter(|&j| globals[j] != g).collect();
        let &j = others
            .choose(&mut rng)
            .ok_or_else(|| Error::invalid("swap evaluation needs at least two global classes"))?;
        pairs.push((i, j));
    }
    swap_eval_pairs(model, ds, &pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_class_breaks_no_ties() {
        let refs: BTreeMap<u32, f64> = [(1, 10.0), (2, 5.0)].into_iter().collect();
        assert_eq!(nearest_class(9, &refs), Some(1));
        assert_eq!(nearest_class(3, &refs), Some(2));
        assert_eq!(nearest_class(7, &refs), Some(2));
        let refs: BTreeMap<u32, f64> = [(1, 10.0), (2, 6.0)].into_iter().collect();
        assert_eq!(nearest_class(8, &refs), None);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
