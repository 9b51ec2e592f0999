//! Seeded synthetic scenes with natural-image statistics.
//!
//! The generator is a dead-leaves model (occluding disks with power-law radii,
//! faint shading gradients) rendered at 2x and box-downsampled, plus a 1/f
//! texture layer and sensor noise, then quantized to 8 bits. It stands in for
//! a raw camera corpus and also produces the probe images for kernel fitting.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::{GrayImage, RandomSeed};
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// Disk radius range as a fraction of the shorter side.
    pub min_radius: f64,
    pub max_radius: f64,
    /// Disks per 256x256 area; scaled with the image area.
    pub disks_per_area: (usize, usize),
    /// Standard deviation of the 1/f texture layer.
    pub texture_std: f64,
    /// Sensor noise standard deviation in 8-bit units.
    pub noise_std_8bit: f64,
    pub supersample: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            min_radius: 3.0 / 256.0,
            max_radius: 60.0 / 256.0,
            disks_per_area: (150, 400),
            texture_std: 0.03,
            noise_std_8bit: 2.0,
            supersample: 2,
        }
    }
}

/// Renders one `height x width` scene.
pub fn dead_leaves(height: usize, width: usize, params: &SceneParams, seed: RandomSeed) -> GrayImage {
    let mut rng = seed.rng();
    let ss = params.supersample.max(1);
    let (sh, sw) = (height * ss, width * ss);
    let side = height.min(width) as f64 * ss as f64;
    let mut canvas = Array2::from_elem((sh, sw), rng.random_range(0.2..0.8));

    let area_scale = (height * width) as f64 / (256.0 * 256.0);
    let lo = ((params.disks_per_area.0 as f64 * area_scale).round() as usize).max(1);
    let hi = ((params.disks_per_area.1 as f64 * area_scale).round() as usize).max(lo + 1);
    let count = rng.random_range(lo..hi);
    let rmin = params.min_radius * side;
    let rmax = params.max_radius * side;
    let shading = Normal::new(0.0, 0.002 / ss as f64).expect("valid normal");
    for _ in 0..count {
        // inverse-CDF draw from density ~ r^-3 on [rmin, rmax]
        let u: f64 = rng.random();
        let r = (rmin.powi(-2) - u * (rmin.powi(-2) - rmax.powi(-2))).powf(-0.5);
        let cy = rng.random::<f64>() * sh as f64;
        let cx = rng.random::<f64>() * sw as f64;
        let value: f64 = rng.random();
        let gy = shading.sample(&mut rng);
        let gx = shading.sample(&mut rng);
        let r0 = (cy - r).floor().max(0.0) as usize;
        let r1 = ((cy + r).ceil() as usize).min(sh);
        let c0 = (cx - r).floor().max(0.0) as usize;
        let c1 = ((cx + r).ceil() as usize).min(sw);
        for y in r0..r1 {
            let dy = y as f64 - cy;
            for x in c0..c1 {
                let dx = x as f64 - cx;
                if dx * dx + dy * dy < r * r {
                    canvas[[y, x]] = value + gx * dx + gy * dy;
                }
            }
        }
    }

    let texture = pink_noise(height, width, &mut rng);
    let tex_std = std_dev(texture.iter().copied()).max(1e-12);
    let noise = Normal::new(0.0, params.noise_std_8bit / 255.0).expect("valid normal");
    let norm = (ss * ss) as f64;
    let pixels = Array2::from_shape_fn((height, width), |(r, c)| {
        let mut acc = 0.0;
        for i in 0..ss {
            for j in 0..ss {
                acc += canvas[[r * ss + i, c * ss + j]];
            }
        }
        let v = 0.85 * acc / norm + 0.075 + texture[[r, c]] / tex_std * params.texture_std;
        v + noise.sample(&mut rng)
    });
    GrayImage::new(pixels).expect("rendered scene is finite").quantized()
}

/// White Gaussian noise shaped to a 1/f amplitude spectrum.
fn pink_noise(height: usize, width: usize, rng: &mut impl Rng) -> Array2<f64> {
    let white = Normal::new(0.0, 1.0).expect("valid normal");
    let mut data: Vec<Complex<f64>> = (0..height * width)
        .map(|_| Complex::new(white.sample(rng), 0.0))
        .collect();
    fft2(&mut data, height, width, false);
    for r in 0..height {
        let fr = freq(r, height);
        for c in 0..width {
            let fc = freq(c, width);
            let f = (fr * fr + fc * fc).sqrt();
            let f = if f == 0.0 { 1.0 } else { f };
            data[r * width + c] /= f;
        }
    }
    fft2(&mut data, height, width, true);
    Array2::from_shape_fn((height, width), |(r, c)| data[r * width + c].re)
}

fn freq(i: usize, n: usize) -> f64 {
    let i = if i <= (n - 1) / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    };
    i / n as f64
}

/// In-place separable 2-D FFT of a row-major buffer (unnormalized).
fn fft2(data: &mut [Complex<f64>], height: usize, width: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(width), planner.plan_fft_inverse(height))
    } else {
        (planner.plan_fft_forward(width), planner.plan_fft_forward(height))
    };
    for row in data.chunks_mut(width) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); height];
    for c in 0..width {
        for r in 0..height {
            col[r] = data[r * width + c];
        }
        col_fft.process(&mut col);
        for r in 0..height {
            data[r * width + c] = col[r];
        }
    }
}

fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Writes `count` scenes of `side x side` as `scene_0000.pgm`, ... into
/// `dir`, each drawn from its own derived seed. Returns the written paths.
pub fn write_corpus(dir: &Path, count: usize, side: usize, seed: RandomSeed) -> Result<Vec<PathBuf>> {
    let params = SceneParams::default();
    (0..count)
        .map(|i| {
            let img = dead_leaves(side, side, &params, seed.derive(i as u64));
            let path = dir.join(format!("scene_{i:04}.pgm"));
            io::write_pgm(&path, &img)?;
            Ok(path)
        })
        .collect()
}
