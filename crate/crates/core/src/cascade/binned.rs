//! Quantized feature values for split search.
//!
//! Each feature's range over the current sample set is cut by 255 evenly
//! spaced thresholds into 256 bins. A sample's bin is the number of thresholds
//! strictly below its value, so `bin <= b` holds exactly when
//! `value <= threshold[b]`, the comparison the trained trees use at test time.

use rayon::prelude::*;

use crate::error::{McfError, Result};
use crate::features::FeaturePool;
use crate::layers::LayerData;

pub const N_BINS: usize = 256;

/// Samples per chunk in the binning pass.
const CHUNK: usize = 256;

pub struct BinnedFeatures {
    pool: FeaturePool,
    n_samples: usize,
    thresholds: Vec<Vec<f32>>,
    /// Feature-major: `bins[f * n_samples + s]`.
    bins: Vec<u8>,
}

impl BinnedFeatures {
    /// Evaluates every pool feature on every sample's layer, twice: once for
    /// the value ranges and once to bin. `layer_of` must return the same
    /// layer for a given sample on every call.
    pub fn build<F>(pool: FeaturePool, n_samples: usize, layer_of: F) -> Result<Self>
    where
        F: Fn(usize) -> Result<LayerData> + Sync,
    {
        if n_samples == 0 {
            return Err(McfError::Training("no samples to bin".into()));
        }
        if pool.is_empty() {
            return Err(McfError::Config(format!(
                "empty feature pool for layer {}",
                pool.layer_index()
            )));
        }
        let probe = layer_of(0)?;
        let view = probe.view();
        for spec in pool.specs() {
            spec.validate(view.channels(), view.width(), view.height())?;
        }
        let n_features = pool.len();
        let specs = pool.specs();

        let (mins, maxs) = (0..n_samples)
            .into_par_iter()
            .try_fold(
                || (vec![f32::INFINITY; n_features], vec![f32::NEG_INFINITY; n_features]),
                |(mut lo, mut hi), s| {
                    let layer = layer_of(s)?;
                    let view = layer.view();
                    for (j, spec) in specs.iter().enumerate() {
                        let v = spec.evaluate_on(&view);
                        lo[j] = lo[j].min(v);
                        hi[j] = hi[j].max(v);
                    }
                    Ok::<_, McfError>((lo, hi))
                },
            )
            .try_reduce(
                || (vec![f32::INFINITY; n_features], vec![f32::NEG_INFINITY; n_features]),
                |(mut lo, mut hi), (lo2, hi2)| {
                    for j in 0..n_features {
                        lo[j] = lo[j].min(lo2[j]);
                        hi[j] = hi[j].max(hi2[j]);
                    }
                    Ok((lo, hi))
                },
            )?;

        let thresholds: Vec<Vec<f32>> = mins
            .iter()
            .zip(&maxs)
            .map(|(&lo, &hi)| uniform_thresholds(lo, hi))
            .collect();

        let mut bins = vec![0u8; n_features * n_samples];
        let starts: Vec<usize> = (0..n_samples).step_by(CHUNK).collect();
        for start in starts {
            let end = (start + CHUNK).min(n_samples);
            let rows: Vec<Vec<u8>> = (start..end)
                .into_par_iter()
                .map(|s| {
                    let layer = layer_of(s)?;
                    let view = layer.view();
                    Ok(specs
                        .iter()
                        .zip(&thresholds)
                        .map(|(spec, t)| bin_of(t, spec.evaluate_on(&view)))
                        .collect())
                })
                .collect::<Result<_>>()?;
            for (offset, row) in rows.iter().enumerate() {
                let s = start + offset;
                for (j, &b) in row.iter().enumerate() {
                    bins[j * n_samples + s] = b;
                }
            }
        }
        Ok(BinnedFeatures {
            pool,
            n_samples,
            thresholds,
            bins,
        })
    }

    /// Builds directly from a feature-major value matrix `values[f][s]`.
    pub fn from_values(pool: FeaturePool, values: &[Vec<f32>]) -> Result<Self> {
        if values.len() != pool.len() {
            return Err(McfError::InvalidInput(format!(
                "{} value columns for {} features",
                values.len(),
                pool.len()
            )));
        }
        let n_samples = values.first().map_or(0, Vec::len);
        if n_samples == 0 || values.iter().any(|c| c.len() != n_samples) {
            return Err(McfError::InvalidInput("ragged or empty value matrix".into()));
        }
        let mut thresholds = Vec::with_capacity(values.len());
        let mut bins = Vec::with_capacity(values.len() * n_samples);
        for column in values {
            let lo = column.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = column.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let t = uniform_thresholds(lo, hi);
            bins.extend(column.iter().map(|&v| bin_of(&t, v)));
            thresholds.push(t);
        }
        Ok(BinnedFeatures {
            pool,
            n_samples,
            thresholds,
            bins,
        })
    }

    pub fn pool(&self) -> &FeaturePool {
        &self.pool
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_features(&self) -> usize {
        self.pool.len()
    }

    #[inline]
    pub fn column(&self, feature: usize) -> &[u8] {
        &self.bins[feature * self.n_samples..(feature + 1) * self.n_samples]
    }

    pub fn thresholds(&self, feature: usize) -> &[f32] {
        &self.thresholds[feature]
    }
}

/// 255 evenly spaced cut points strictly inside `(lo, hi)`; none for a
/// constant feature.
pub fn uniform_thresholds(lo: f32, hi: f32) -> Vec<f32> {
    if !(hi > lo) {
        return Vec::new();
    }
    let (lo, hi) = (lo as f64, hi as f64);
    (1..N_BINS)
        .map(|b| (lo + (hi - lo) * b as f64 / N_BINS as f64) as f32)
        .collect()
}

#[inline]
pub fn bin_of(thresholds: &[f32], v: f32) -> u8 {
    thresholds.partition_point(|&t| t < v) as u8
}
