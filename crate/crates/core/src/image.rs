//! Canonical image and signal types shared by every pipeline stage.
//!
//! Pixels live in the real interval `[0, 1]`. The 8-bit view maps that range
//! onto `0..=255` with round-half-away-from-zero, so a round trip through the
//! 8-bit view moves no pixel by more than `1/510`.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Peak value of an 8-bit pixel, used as the PSNR reference level.
pub const PEAK_8BIT: f64 = 255.0;

/// Real-valued grayscale image of size `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pixels: Array2<f64>,
}

impl GrayImage {
    /// Wraps a pixel matrix; rejects empty or non-finite data.
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::dim("non-empty image", format!("{h}x{w}")));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("image contains non-finite pixels".into()));
        }
        Ok(Self { pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        Self {
            pixels: Array2::zeros((height, width)),
        }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        Self {
            pixels: Array2::from_elem((height, width), value),
        }
    }

    /// Builds an image from nested rows, mostly useful in tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(Error::dim("rectangular rows", "ragged rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let pixels = Array2::from_shape_vec((h, w), flat).map_err(|e| Error::dim(format!("{h}x{w}"), e))?;
        Self::new(pixels)
    }

    /// Interprets 8-bit samples (row-major) as an image in `[0, 1]`.
    pub fn from_u8(height: usize, width: usize, data: &[u8]) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(height * width, data.len()));
        }
        let pixels = Array2::from_shape_fn((height, width), |(r, c)| f64::from(data[r * width + c]) / PEAK_8BIT);
        Self::new(pixels)
    }

    /// Row-major 8-bit view. Values are clamped to `[0, 1]` first.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| to_8bit(v)).collect()
    }

    /// Snaps every pixel onto the 8-bit grid, as storing to a file would.
    pub fn quantized(&self) -> Self {
        Self {
            pixels: self.pixels.mapv(|v| f64::from(to_8bit(v)) / PEAK_8BIT),
        }
    }

    pub fn clamped(&self) -> Self {
        Self {
            pixels: self.pixels.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut Array2<f64> {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Array2<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[[row, col]]
    }

    /// Copies the `size_h x size_w` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, size_h: usize, size_w: usize) -> Result<Self> {
        if row + size_h > self.height() || col + size_w > self.width() {
            return Err(Error::dim(
                format!("window inside {}x{}", self.height(), self.width()),
                format!("({row},{col})+{size_h}x{size_w}"),
            ));
        }
        Self::new(
            self.pixels
                .slice(ndarray::s![row..row + size_h, col..col + size_w])
                .to_owned(),
        )
    }

    pub fn mean(&self) -> f64 {
        self.pixels.mean().unwrap_or(0.0)
    }

    /// Sum of squared forward differences in both directions.
    pub fn gradient_energy(&self) -> f64 {
        let p = &self.pixels;
        let (h, w) = p.dim();
        let mut e = 0.0;
        for r in 0..h {
            for c in 0..w {
                if c + 1 < w {
                    e += (p[[r, c + 1]] - p[[r, c]]).powi(2);
                }
                if r + 1 < h {
                    e += (p[[r + 1, c]] - p[[r, c]]).powi(2);
                }
            }
        }
        e
    }
}

fn to_8bit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * PEAK_8BIT).round() as u8
}

/// Flattened image, length `h * w`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalVector(pub Vec<f64>);

impl SignalVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for SignalVector {
    fn from(v: Vec<f64>) -> Self {
        SignalVector(v)
    }
}

/// Column-major scan: walks each column top to bottom, columns left to right.
pub fn raster_scan(img: &GrayImage) -> SignalVector {
    let (h, w) = img.dim();
    let mut out = Vec::with_capacity(h * w);
    for c in 0..w {
        for r in 0..h {
            out.push(img.pixels[[r, c]]);
        }
    }
    SignalVector(out)
}

/// Exact inverse of [`raster_scan`].
pub fn inverse_raster_scan(v: &SignalVector, height: usize, width: usize) -> Result<GrayImage> {
    if height == 0 || width == 0 || v.len() != height * width {
        return Err(Error::dim(format!("{height}x{width}"), v.len()));
    }
    let pixels = Array2::from_shape_fn((height, width), |(r, c)| v.0[c * height + r]);
    GrayImage::new(pixels)
}

/// Peak signal-to-noise ratio in dB with pixels mapped onto `[0, peak]`.
///
/// Identical images yield `f64::INFINITY`.
pub fn psnr(reference: &GrayImage, test: &GrayImage, peak: f64) -> Result<f64> {
    if reference.dim() != test.dim() {
        return Err(Error::dim(
            format!("{:?}", reference.dim()),
            format!("{:?}", test.dim()),
        ));
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidParameter(format!("peak must be positive, got {peak}")));
    }
    let n = reference.pixels.len() as f64;
    let sse: f64 = reference
        .pixels
        .iter()
        .zip(test.pixels.iter())
        .map(|(a, b)| ((a - b) * peak).powi(2))
        .sum();
    let mse = sse / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// The three imaging systems to be told apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    /// Compressive imaging.
    #[serde(rename = "C")]
    Cs,
    /// Conventional imaging followed by wavelet compression.
    #[serde(rename = "J")]
    Jp2,
    /// Conventional raw imaging.
    #[serde(rename = "R")]
    Raw,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [ClassLabel::Cs, ClassLabel::Jp2, ClassLabel::Raw];

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Cs => 0,
            ClassLabel::Jp2 => 1,
            ClassLabel::Raw => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            ClassLabel::Cs => "C",
            ClassLabel::Jp2 => "J",
            ClassLabel::Raw => "R",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "C" | "CS" | "cs" => Ok(ClassLabel::Cs),
            "J" | "JP2" | "jp2" => Ok(ClassLabel::Jp2),
            "R" | "RAW" | "raw" => Ok(ClassLabel::Raw),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

/// Seed for every random draw in the crate. Equal seeds give bit-identical
/// draws; child seeds are derived, never re-used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RandomSeed(pub u64);

impl RandomSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Independent child seed for sub-stream `stream` (SplitMix64 finalizer).
    pub fn derive(self, stream: u64) -> RandomSeed {
        let mut z = self
            .0
            .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        RandomSeed(z ^ (z >> 31))
    }
}

impl Default for RandomSeed {
    fn default() -> Self {
        RandomSeed(0x5EED)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn raster_scan_is_column_major() {
        let img = GrayImage::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(raster_scan(&img).0, vec![1.0, 3.0, 2.0, 4.0]);
        let single = GrayImage::from_rows(&[vec![5.0]]).unwrap();
        assert_eq!(raster_scan(&single).0, vec![5.0]);
    }

    #[test]
    fn inverse_scan_examples() {
        let v = SignalVector(vec![1.0, 3.0, 2.0, 4.0]);
        let img = inverse_raster_scan(&v, 2, 2).unwrap();
        assert_eq!(img, GrayImage::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        assert!(matches!(inverse_raster_scan(&v, 3, 2), Err(Error::Dimension { .. })));
        let z = inverse_raster_scan(&SignalVector(vec![0.0; 4]), 2, 2).unwrap();
        assert_eq!(z, GrayImage::zeros(2, 2));
    }

    #[test]
    fn raster_round_trip_128() {
        let mut rng = RandomSeed(3).rng();
        let px = Array2::from_shape_fn((128, 128), |_| rng.random::<f64>());
        let img = GrayImage::new(px).unwrap();
        let v = raster_scan(&img);
        assert_eq!(v.len(), 16384);
        assert_eq!(inverse_raster_scan(&v, 128, 128).unwrap(), img);
    }

    #[test]
    fn psnr_examples() {
        let zero = GrayImage::zeros(4, 4);
        assert_eq!(psnr(&zero, &zero, PEAK_8BIT).unwrap(), f64::INFINITY);
        let full = GrayImage::constant(4, 4, 1.0);
        assert!(psnr(&zero, &full, PEAK_8BIT).unwrap().abs() < 1e-12);
        // off by one 8-bit level everywhere: 10 log10(255^2 / 1)
        let one = GrayImage::constant(4, 4, 1.0 / 255.0);
        let expected = 20.0 * 255f64.log10();
        assert!((psnr(&zero, &one, PEAK_8BIT).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 48.1308).abs() < 1e-4);
        assert!(psnr(&zero, &GrayImage::zeros(4, 5), PEAK_8BIT).is_err());
    }

    #[test]
    fn psnr_shift_invariant_and_decreasing_in_noise() {
        let mut rng = RandomSeed(9).rng();
        let base = Array2::from_shape_fn((32, 32), |_| rng.random::<f64>() * 0.5);
        let noise = Array2::from_shape_fn((32, 32), |_| rng.random::<f64>() - 0.5);
        let a = GrayImage::new(base.clone()).unwrap();
        let small = GrayImage::new(&base + &(&noise * 0.01)).unwrap();
        let large = GrayImage::new(&base + &(&noise * 0.05)).unwrap();
        let p_small = psnr(&a, &small, PEAK_8BIT).unwrap();
        let p_large = psnr(&a, &large, PEAK_8BIT).unwrap();
        assert!(p_small > p_large);
        let a_shift = GrayImage::new(&base + 0.25).unwrap();
        let small_shift = GrayImage::new(small.pixels() + 0.25).unwrap();
        assert!((psnr(&a_shift, &small_shift, PEAK_8BIT).unwrap() - p_small).abs() < 1e-9);
    }

    #[test]
    fn label_parsing() {
        for l in ClassLabel::ALL {
            assert_eq!(l.code().parse::<ClassLabel>().unwrap(), l);
            assert_eq!(ClassLabel::from_index(l.index()), Some(l));
        }
        assert!("X".parse::<ClassLabel>().is_err());
    }

    #[test]
    fn seeds_are_reproducible() {
        let a: Vec<u64> = RandomSeed(42).rng().random_iter().take(8).collect();
        let b: Vec<u64> = RandomSeed(42).rng().random_iter().take(8).collect();
        assert_eq!(a, b);
        assert_ne!(RandomSeed(42).derive(0), RandomSeed(42).derive(1));
    }

    proptest! {
        #[test]
        fn raster_bijection(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let mut rng = RandomSeed(seed).rng();
            let img = GrayImage::new(Array2::from_shape_fn((h, w), |_| rng.random::<f64>())).unwrap();
            let back = inverse_raster_scan(&raster_scan(&img), h, w).unwrap();
            prop_assert_eq!(back, img);
        }

        #[test]
        fn eight_bit_round_trip_error_bounded(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
            let mut rng = RandomSeed(seed).rng();
            let img = GrayImage::new(Array2::from_shape_fn((h, w), |_| rng.random::<f64>())).unwrap();
            let q = img.quantized();
            for (a, b) in img.pixels().iter().zip(q.pixels().iter()) {
                prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-15);
            }
        }
    }
}
