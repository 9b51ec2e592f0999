//! Kernel-to-feature conversion and per-dimension standardization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::BlurKernel;

/// A kernel min-max scaled to `[0, 1]` and stored as 8-bit grey levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelFeatureImage {
    side: usize,
    pixels: Vec<u8>,
}

impl KernelFeatureImage {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Pixels rescaled to `[0, 1]`, row-major.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect()
    }
}

/// Min-max scaling of the entries followed by rounding to 8 bits. A constant
/// kernel maps to all zeros.
pub fn normalize_kernel(k: &BlurKernel) -> KernelFeatureImage {
    let unit = normalize_entries(k.entries());
    KernelFeatureImage {
        side: k.side(),
        pixels: unit.iter().map(|&v| (v * 255.0).round() as u8).collect(),
    }
}

/// The `[0, 1]` scaling before quantization.
pub fn normalize_entries(entries: &[f64]) -> Vec<f64> {
    let lo = entries.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = entries.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; entries.len()];
    }
    entries.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// Per-dimension mean and sample standard deviation of the training features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn fit(samples: &[Vec<f64>]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidParameter("no samples to fit normalization".into()))?;
        let d = first.len();
        if let Some(bad) = samples.iter().find(|s| s.len() != d) {
            return Err(Error::dim(d, bad.len()));
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; d];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; d];
        if samples.len() > 1 {
            for s in samples {
                for ((acc, v), m) in std.iter_mut().zip(s).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
            std.iter_mut().for_each(|v| *v = (*v / (n - 1.0)).sqrt());
        }
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `(h - mean) / std` entry by entry; a zero standard deviation divides by 1.
pub fn standardize(h: &[f64], stats: &NormalizationStats) -> Result<Vec<f64>> {
    if h.len() != stats.dim() {
        return Err(Error::dim(stats.dim(), h.len()));
    }
    Ok(h.iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(v, (m, s))| (v - m) / if *s == 0.0 { 1.0 } else { *s })
        .collect())
}
