//! Two-stage thresholding detector on wavelet coefficient statistics, used
//! as a comparison baseline.
//!
//! Both statistics are stand-ins defined here:
//! - stage 1: squared L2 distance between the histogram of the finest detail
//!   coefficients and the mass the fitted Laplace law puts in the same bins.
//!   Above `tau1` the image is treated as processed (not RAW).
//! - stage 2: per-sample log-likelihood gain of a two-component Laplace
//!   mixture (fitted by EM) over the single Laplace. Above `tau2` the image
//!   is called JP2, otherwise CS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ClassLabel, GrayImage};
use crate::wavelet::{dwt2, FilterBank};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceFit {
    pub location: f64,
    pub diversity: f64,
    pub count: usize,
}

impl LaplaceFit {
    pub fn cdf(&self, x: f64) -> f64 {
        let z = (x - self.location) / self.diversity;
        if z < 0.0 {
            0.5 * z.exp()
        } else {
            1.0 - 0.5 * (-z).exp()
        }
    }

    pub fn log_density(&self, x: f64) -> f64 {
        -(2.0 * self.diversity).ln() - (x - self.location).abs() / self.diversity
    }
}

/// Maximum-likelihood Laplace fit: the median and the mean absolute
/// deviation from it. An even count uses the midpoint of the middle pair.
pub fn fit_laplace_ml(samples: &[f64]) -> Result<LaplaceFit> {
    if samples.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "{} samples; need at least 2",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let location = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let diversity = sorted.iter().map(|v| (v - location).abs()).sum::<f64>() / n as f64;
    if !(diversity > 0.0) {
        return Err(Error::Degenerate("all samples are equal".into()));
    }
    Ok(LaplaceFit {
        location,
        diversity,
        count: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorThresholds {
    pub tau1: f64,
    pub tau2: f64,
}

impl DetectorThresholds {
    pub const TAU1_RANGE: (f64, f64) = (0.001, 0.002);
    pub const TAU2_RANGE: (f64, f64) = (0.002, 0.003);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChuConfig {
    pub levels: usize,
    pub em_iterations: usize,
    /// Points per threshold axis in the grid search.
    pub grid_points: usize,
}

impl Default for ChuConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            em_iterations: 100,
            grid_points: 21,
        }
    }
}

/// The two detector statistics of one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChuStatistics {
    pub histogram_residual: f64,
    pub mixture_gain: f64,
}

/// Histogram bins span `location +- HALF_SPAN` diversities.
const HALF_SPAN: f64 = 8.0;
const BINS: usize = 32;

pub fn chu_statistics(img: &GrayImage, cfg: &ChuConfig) -> Result<ChuStatistics> {
    let pyr = dwt2(img, cfg.levels, &FilterBank::bior44())?;
    let finest = &pyr.details[0];
    let coeffs: Vec<f64> = finest
        .lh
        .iter()
        .chain(finest.hl.iter())
        .chain(finest.hh.iter())
        .copied()
        .collect();
    let fit = fit_laplace_ml(&coeffs).map_err(|e| Error::Degenerate(format!("finest detail bands: {e}")))?;
    // far below one 8-bit grey level: only filter-tap rounding is left
    if fit.diversity < 1e-9 {
        return Err(Error::Degenerate("finest detail bands are empty".into()));
    }
    Ok(ChuStatistics {
        histogram_residual: histogram_residual(&coeffs, &fit),
        mixture_gain: mixture_gain(&coeffs, &fit, cfg.em_iterations),
    })
}

fn histogram_residual(coeffs: &[f64], fit: &LaplaceFit) -> f64 {
    let lo = fit.location - HALF_SPAN * fit.diversity;
    let width = 2.0 * HALF_SPAN * fit.diversity / BINS as f64;
    let mut counts = [0usize; BINS];
    for &c in coeffs {
        let k = ((c - lo) / width).floor();
        // tails fold into the end bins
        let k = k.clamp(0.0, (BINS - 1) as f64) as usize;
        counts[k] += 1;
    }
    let n = coeffs.len() as f64;
    (0..BINS)
        .map(|k| {
            let left = if k == 0 { 0.0 } else { fit.cdf(lo + k as f64 * width) };
            let right = if k == BINS - 1 {
                1.0
            } else {
                fit.cdf(lo + (k + 1) as f64 * width)
            };
            let d = counts[k] as f64 / n - (right - left);
            d * d
        })
        .sum()
}

/// Mean log-likelihood gain of a two-component Laplace mixture sharing the
/// fitted location, after `iterations` EM steps from a narrow/wide start.
fn mixture_gain(coeffs: &[f64], fit: &LaplaceFit, iterations: usize) -> f64 {
    let dev: Vec<f64> = coeffs.iter().map(|c| (c - fit.location).abs()).collect();
    let floor = fit.diversity * 1e-6;
    let (mut w, mut b1, mut b2) = (0.5, 0.25 * fit.diversity, 2.0 * fit.diversity);
    let mut resp = vec![0.0; dev.len()];
    for _ in 0..iterations {
        let (mut s1, mut d1, mut d2) = (0.0, 0.0, 0.0);
        for (r, &d) in resp.iter_mut().zip(&dev) {
            let p1 = w / (2.0 * b1) * (-d / b1).exp();
            let p2 = (1.0 - w) / (2.0 * b2) * (-d / b2).exp();
            *r = if p1 + p2 > 0.0 { p1 / (p1 + p2) } else { 0.5 };
            s1 += *r;
            d1 += *r * d;
            d2 += (1.0 - *r) * d;
        }
        let n = dev.len() as f64;
        w = (s1 / n).clamp(1e-6, 1.0 - 1e-6);
        b1 = (d1 / s1.max(f64::MIN_POSITIVE)).max(floor);
        b2 = (d2 / (n - s1).max(f64::MIN_POSITIVE)).max(floor);
    }
    let single: f64 = dev
        .iter()
        .map(|&d| -(2.0 * fit.diversity).ln() - d / fit.diversity)
        .sum();
    let mixed: f64 = dev
        .iter()
        .map(|&d| (w / (2.0 * b1) * (-d / b1).exp() + (1.0 - w) / (2.0 * b2) * (-d / b2).exp()).ln())
        .sum();
    (mixed - single) / dev.len() as f64
}

pub fn classify_statistics(s: &ChuStatistics, t: &DetectorThresholds) -> ClassLabel {
    if s.histogram_residual <= t.tau1 {
        ClassLabel::Raw
    } else if s.mixture_gain > t.tau2 {
        ClassLabel::Jp2
    } else {
        ClassLabel::Cs
    }
}

pub fn chu_classify(img: &GrayImage, t: &DetectorThresholds, cfg: &ChuConfig) -> Result<ClassLabel> {
    Ok(classify_statistics(&chu_statistics(img, cfg)?, t))
}

/// Grid search over both threshold ranges (endpoints included) maximizing
/// learning-set accuracy. Ties keep the first grid point in row-major
/// `(tau1, tau2)` order.
pub fn fit_thresholds(stats: &[ChuStatistics], labels: &[ClassLabel], cfg: &ChuConfig) -> Result<DetectorThresholds> {
    if stats.is_empty() {
        return Err(Error::InvalidParameter("empty learning split".into()));
    }
    if stats.len() != labels.len() {
        return Err(Error::dim(stats.len(), labels.len()));
    }
    let g = cfg.grid_points.max(2);
    let axis = |(lo, hi): (f64, f64), i: usize| lo + (hi - lo) * i as f64 / (g - 1) as f64;
    let mut best = (
        0usize,
        DetectorThresholds {
            tau1: DetectorThresholds::TAU1_RANGE.0,
            tau2: DetectorThresholds::TAU2_RANGE.0,
        },
    );
    let mut first = true;
    for i in 0..g {
        for j in 0..g {
            let t = DetectorThresholds {
                tau1: axis(DetectorThresholds::TAU1_RANGE, i),
                tau2: axis(DetectorThresholds::TAU2_RANGE, j),
            };
            let correct = stats
                .iter()
                .zip(labels)
                .filter(|(s, l)| classify_statistics(s, &t) == **l)
                .count();
            if first || correct > best.0 {
                best = (correct, t);
                first = false;
            }
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::RandomSeed;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn laplace_fit_closed_forms() {
        let f = fit_laplace_ml(&[-1.0, 1.0]).unwrap();
        assert_eq!((f.location, f.diversity, f.count), (0.0, 1.0, 2));
        assert!(fit_laplace_ml(&[3.0, 3.0, 3.0]).is_err());
        assert!(fit_laplace_ml(&[1.0]).is_err());
    }

    #[test]
    fn laplace_fit_recovers_diversity() {
        // inverse-CDF sampling of Laplace(0, 2)
        let mut rng = RandomSeed(7).rng();
        let xs: Vec<f64> = (0..100_000)
            .map(|_| {
                let u: f64 = rng.random::<f64>() - 0.5;
                -2.0 * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            })
            .collect();
        let f = fit_laplace_ml(&xs).unwrap();
        assert!((f.diversity - 2.0).abs() < 0.1, "{f:?}");
        assert!(f.location.abs() < 0.05);
        // a sample from the fitted law itself has a tiny histogram residual
        assert!(histogram_residual(&xs, &f) < 1e-4);
        // and a near-zero mixture gain
        assert!(mixture_gain(&xs, &f, 100).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn laplace_fit_equivariance(
            xs in prop::collection::vec(-10.0f64..10.0, 3..60),
            shift in -5.0f64..5.0,
            scale in 0.1f64..10.0,
        ) {
            let Ok(f) = fit_laplace_ml(&xs) else { return Ok(()) };
            let shifted = fit_laplace_ml(&xs.iter().map(|v| v + shift).collect::<Vec<_>>()).unwrap();
            prop_assert!((shifted.location - f.location - shift).abs() < 1e-9);
            prop_assert!((shifted.diversity - f.diversity).abs() < 1e-9);
            let scaled = fit_laplace_ml(&xs.iter().map(|v| v * scale).collect::<Vec<_>>()).unwrap();
            prop_assert!((scaled.location - f.location * scale).abs() < 1e-9);
            prop_assert!((scaled.diversity - f.diversity * scale).abs() < 1e-9 * scale.max(1.0));
        }
    }

    #[test]
    fn two_scale_mixture_has_positive_gain() {
        let mut rng = RandomSeed(8).rng();
        let xs: Vec<f64> = (0..20_000)
            .map(|i| {
                let b = if i % 2 == 0 { 0.1 } else { 3.0 };
                let u: f64 = rng.random::<f64>() - 0.5;
                -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
            })
            .collect();
        let f = fit_laplace_ml(&xs).unwrap();
        assert!(mixture_gain(&xs, &f, 100) > 0.1);
        assert!(histogram_residual(&xs, &f) > 1e-3);
    }

    #[test]
    fn threshold_grid() {
        let s = |r, g| ChuStatistics {
            histogram_residual: r,
            mixture_gain: g,
        };
        let stats = [s(0.0005, 0.0), s(0.0030, 0.0100), s(0.0030, 0.0001)];
        let labels = [ClassLabel::Raw, ClassLabel::Jp2, ClassLabel::Cs];
        let t = fit_thresholds(&stats, &labels, &ChuConfig::default()).unwrap();
        assert_eq!(
            t,
            DetectorThresholds {
                tau1: 0.001,
                tau2: 0.002
            }
        );
        for (st, l) in stats.iter().zip(labels) {
            assert_eq!(classify_statistics(st, &t), l);
        }
        // an unseparable set still returns thresholds inside the ranges
        let t = fit_thresholds(&[s(1.0, 1.0)], &[ClassLabel::Cs], &ChuConfig::default()).unwrap();
        assert!((0.001..=0.002).contains(&t.tau1) && (0.002..=0.003).contains(&t.tau2));
        // the upper endpoints are on the grid
        let t = fit_thresholds(&[s(0.00199, 0.0)], &[ClassLabel::Raw], &ChuConfig::default()).unwrap();
        assert_eq!(t.tau1, 0.002);
        assert!(fit_thresholds(&[], &[], &ChuConfig::default()).is_err());
    }

    #[test]
    fn flat_images_are_degenerate() {
        let err = chu_statistics(&GrayImage::constant(64, 64, 0.3), &ChuConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }
}
