//! Separable 2-D multilevel biorthogonal wavelet transform.
//!
//! Filtering is plain convolution with whole-point symmetric extension
//! (`x[-i] = x[i]`, `x[n-1+i] = x[n-1-i]`). The lowpass analysis filter is
//! centred on even samples and the highpass on odd samples, which makes the
//! transform non-expansive: an even-length signal splits into two halves.
//! Every level therefore needs even dimensions.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{GrayImage, RandomSeed, SignalVector};

// CDF 9/7 ("bior4.4") taps, centred. Values as published with the
// PyWavelets / MATLAB `bior4.4` definition (lowpass normalised to sum sqrt 2).
const BIOR44_ANALYSIS_LOW: [f64; 9] = [
    0.037_828_455_507_264_04,
    -0.023_849_465_019_556_843,
    -0.110_624_404_418_437_18,
    0.377_402_855_612_830_66,
    0.852_698_679_008_893_8,
    0.377_402_855_612_830_66,
    -0.110_624_404_418_437_18,
    -0.023_849_465_019_556_843,
    0.037_828_455_507_264_04,
];
const BIOR44_ANALYSIS_HIGH: [f64; 7] = [
    -0.064_538_882_628_697_06,
    0.040_689_417_609_164_06,
    0.418_092_273_221_617_24,
    -0.788_485_616_405_582_9,
    0.418_092_273_221_617_24,
    0.040_689_417_609_164_06,
    -0.064_538_882_628_697_06,
];
const BIOR44_SYNTHESIS_LOW: [f64; 7] = [
    -0.064_538_882_628_697_06,
    -0.040_689_417_609_164_06,
    0.418_092_273_221_617_24,
    0.788_485_616_405_582_9,
    0.418_092_273_221_617_24,
    -0.040_689_417_609_164_06,
    -0.064_538_882_628_697_06,
];
const BIOR44_SYNTHESIS_HIGH: [f64; 9] = [
    -0.037_828_455_507_264_04,
    -0.023_849_465_019_556_843,
    0.110_624_404_418_437_18,
    0.377_402_855_612_830_66,
    -0.852_698_679_008_893_8,
    0.377_402_855_612_830_66,
    0.110_624_404_418_437_18,
    -0.023_849_465_019_556_843,
    -0.037_828_455_507_264_04,
];

/// Analysis/synthesis filter pairs. All four filters are odd length and
/// indexed around their centre tap.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    analysis_low: Vec<f64>,
    analysis_high: Vec<f64>,
    synthesis_low: Vec<f64>,
    synthesis_high: Vec<f64>,
}

impl FilterBank {
    /// Validates odd lengths and perfect reconstruction (error < 1e-8 on a
    /// seeded random signal).
    pub fn new(
        analysis_low: Vec<f64>,
        analysis_high: Vec<f64>,
        synthesis_low: Vec<f64>,
        synthesis_high: Vec<f64>,
    ) -> Result<Self> {
        for (name, f) in [
            ("analysis_low", &analysis_low),
            ("analysis_high", &analysis_high),
            ("synthesis_low", &synthesis_low),
            ("synthesis_high", &synthesis_high),
        ] {
            if f.len() % 2 == 0 || f.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be odd length and finite")));
            }
        }
        let fb = Self {
            analysis_low,
            analysis_high,
            synthesis_low,
            synthesis_high,
        };
        let err = fb.reconstruction_error(64, RandomSeed(0xF1));
        if !(err < 1e-8) {
            return Err(Error::InvalidParameter(format!(
                "filter bank is not perfectly reconstructing (error {err:e})"
            )));
        }
        Ok(fb)
    }

    pub fn bior44() -> Self {
        Self {
            analysis_low: BIOR44_ANALYSIS_LOW.to_vec(),
            analysis_high: BIOR44_ANALYSIS_HIGH.to_vec(),
            synthesis_low: BIOR44_SYNTHESIS_LOW.to_vec(),
            synthesis_high: BIOR44_SYNTHESIS_HIGH.to_vec(),
        }
    }

    pub fn analysis_low(&self) -> &[f64] {
        &self.analysis_low
    }

    pub fn analysis_high(&self) -> &[f64] {
        &self.analysis_high
    }

    /// Longest filter length; a rough measure of support.
    pub fn support(&self) -> usize {
        [
            self.analysis_low.len(),
            self.analysis_high.len(),
            self.synthesis_low.len(),
            self.synthesis_high.len(),
        ]
        .into_iter()
        .max()
        .unwrap_or(1)
    }

    fn reconstruction_error(&self, n: usize, seed: RandomSeed) -> f64 {
        let mut rng = seed.rng();
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut lo = vec![0.0; n / 2];
        let mut hi = vec![0.0; n / 2];
        self.analyze(&x, &mut lo, &mut hi);
        let mut y = vec![0.0; n];
        self.synthesize(&lo, &hi, &mut y);
        x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// One analysis step on an even-length signal.
    pub fn analyze(&self, x: &[f64], low: &mut [f64], high: &mut [f64]) {
        let n = x.len();
        debug_assert!(n % 2 == 0 && low.len() == n / 2 && high.len() == n / 2);
        let hl = (self.analysis_low.len() / 2) as isize;
        let hh = (self.analysis_high.len() / 2) as isize;
        for i in 0..n / 2 {
            let centre = 2 * i as isize;
            let mut acc = 0.0;
            for (t, &f) in self.analysis_low.iter().enumerate() {
                let k = t as isize - hl;
                acc += f * x[mirror(centre - k, n)];
            }
            low[i] = acc;
            let centre = centre + 1;
            let mut acc = 0.0;
            for (t, &f) in self.analysis_high.iter().enumerate() {
                let k = t as isize - hh;
                acc += f * x[mirror(centre - k, n)];
            }
            high[i] = acc;
        }
    }

    /// Inverse of [`FilterBank::analyze`].
    pub fn synthesize(&self, low: &[f64], high: &[f64], out: &mut [f64]) {
        let n = out.len();
        debug_assert!(n % 2 == 0 && low.len() == n / 2 && high.len() == n / 2);
        let gl = (self.synthesis_low.len() / 2) as isize;
        let gh = (self.synthesis_high.len() / 2) as isize;
        let reach = gl.max(gh);
        for (j, o) in out.iter_mut().enumerate() {
            let j = j as isize;
            let mut acc = 0.0;
            for t in j - reach..=j + reach {
                let d = j - t;
                let src = mirror(t, n);
                if t.rem_euclid(2) == 0 {
                    if d.abs() <= gl {
                        acc += self.synthesis_low[(d + gl) as usize] * low[src / 2];
                    }
                } else if d.abs() <= gh {
                    acc += self.synthesis_high[(d + gh) as usize] * high[src / 2];
                }
            }
            *o = acc;
        }
    }
}

impl Default for FilterBank {
    fn default() -> Self {
        Self::bior44()
    }
}

/// Whole-point symmetric reflection of index `i` into `0..n`.
fn mirror(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Detail subbands of one level. `lh` is lowpass along rows and highpass
/// along columns (horizontal edges); `hl` the converse; `hh` highpass in both.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailBands {
    pub lh: Array2<f64>,
    pub hl: Array2<f64>,
    pub hh: Array2<f64>,
}

/// Sizes needed to rebuild a pyramid from its flattened coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidShape {
    pub height: usize,
    pub width: usize,
    pub levels: usize,
}

impl PyramidShape {
    pub fn coefficient_count(&self) -> usize {
        self.height * self.width
    }

    fn band_dims(&self, level: usize) -> (usize, usize) {
        (self.height >> level, self.width >> level)
    }
}

/// Multilevel decomposition. `details[0]` is the finest level (level 1) and
/// `details[levels - 1]` the coarsest; `approx` is the level-`levels` LL band.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletPyramid {
    pub shape: PyramidShape,
    pub approx: Array2<f64>,
    pub details: Vec<DetailBands>,
}

impl WaveletPyramid {
    pub fn zeros(shape: PyramidShape) -> Self {
        let (ah, aw) = shape.band_dims(shape.levels);
        let details = (1..=shape.levels)
            .map(|l| {
                let d = shape.band_dims(l);
                DetailBands {
                    lh: Array2::zeros(d),
                    hl: Array2::zeros(d),
                    hh: Array2::zeros(d),
                }
            })
            .collect();
        Self {
            shape,
            approx: Array2::zeros((ah, aw)),
            details,
        }
    }

    pub fn levels(&self) -> usize {
        self.shape.levels
    }

    /// Every subband in flatten order: LL, then (LH, HL, HH) from the
    /// coarsest level down to level 1.
    pub fn bands(&self) -> Vec<&Array2<f64>> {
        let mut out = vec![&self.approx];
        for d in self.details.iter().rev() {
            out.extend([&d.lh, &d.hl, &d.hh]);
        }
        out
    }

    fn bands_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![&mut self.approx];
        for d in self.details.iter_mut().rev() {
            out.push(&mut d.lh);
            out.push(&mut d.hl);
            out.push(&mut d.hh);
        }
        out
    }

    fn check_consistent(&self) -> Result<()> {
        let s = self.shape;
        if self.details.len() != s.levels || self.approx.dim() != s.band_dims(s.levels) {
            return Err(Error::dim(format!("{s:?}"), "inconsistent approximation band"));
        }
        for (i, d) in self.details.iter().enumerate() {
            let want = s.band_dims(i + 1);
            if d.lh.dim() != want || d.hl.dim() != want || d.hh.dim() != want {
                return Err(Error::dim(
                    format!("level {} bands {:?}", i + 1, want),
                    format!("{:?}/{:?}/{:?}", d.lh.dim(), d.hl.dim(), d.hh.dim()),
                ));
            }
        }
        Ok(())
    }
}

/// Checks that an `h x w` image can take `levels` dyadic splits.
pub fn check_decomposable(height: usize, width: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::InvalidParameter("at least one level required".into()));
    }
    let step = 1usize
        .checked_shl(levels as u32)
        .ok_or_else(|| Error::InvalidParameter(format!("{levels} levels")))?;
    if height % step != 0 || width % step != 0 {
        return Err(Error::TooSmall {
            height,
            width,
            reason: format!("{levels} levels need both sides divisible by {step}"),
        });
    }
    Ok(())
}

/// Forward transform.
pub fn dwt2(img: &GrayImage, levels: usize, fb: &FilterBank) -> Result<WaveletPyramid> {
    let (h, w) = img.dim();
    check_decomposable(h, w, levels)?;
    let shape = PyramidShape {
        height: h,
        width: w,
        levels,
    };
    let mut current = img.pixels().clone();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (ll, bands) = analyze_level(&current, fb);
        details.push(bands);
        current = ll;
    }
    Ok(WaveletPyramid {
        shape,
        approx: current,
        details,
    })
}

/// Inverse transform.
pub fn idwt2(pyr: &WaveletPyramid, fb: &FilterBank) -> Result<GrayImage> {
    pyr.check_consistent()?;
    let mut current = pyr.approx.clone();
    for bands in pyr.details.iter().rev() {
        current = synthesize_level(&current, bands, fb);
    }
    GrayImage::new(current)
}

fn analyze_level(x: &Array2<f64>, fb: &FilterBank) -> (Array2<f64>, DetailBands) {
    let (h, w) = x.dim();
    let (h2, w2) = (h / 2, w / 2);
    // rows
    let mut row_lo = Array2::zeros((h, w2));
    let mut row_hi = Array2::zeros((h, w2));
    let mut buf = vec![0.0; w];
    let mut lo = vec![0.0; w2];
    let mut hi = vec![0.0; w2];
    for r in 0..h {
        buf.iter_mut().zip(x.row(r)).for_each(|(b, &v)| *b = v);
        fb.analyze(&buf, &mut lo, &mut hi);
        row_lo.row_mut(r).iter_mut().zip(&lo).for_each(|(d, &v)| *d = v);
        row_hi.row_mut(r).iter_mut().zip(&hi).for_each(|(d, &v)| *d = v);
    }
    // columns
    let (ll, lh) = analyze_columns(&row_lo, fb);
    let (hl, hh) = analyze_columns(&row_hi, fb);
    debug_assert_eq!(ll.dim(), (h2, w2));
    (ll, DetailBands { lh, hl, hh })
}

fn analyze_columns(x: &Array2<f64>, fb: &FilterBank) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = x.dim();
    let mut low = Array2::zeros((h / 2, w));
    let mut high = Array2::zeros((h / 2, w));
    let mut buf = vec![0.0; h];
    let mut lo = vec![0.0; h / 2];
    let mut hi = vec![0.0; h / 2];
    for c in 0..w {
        buf.iter_mut().zip(x.column(c)).for_each(|(b, &v)| *b = v);
        fb.analyze(&buf, &mut lo, &mut hi);
        low.column_mut(c).iter_mut().zip(&lo).for_each(|(d, &v)| *d = v);
        high.column_mut(c).iter_mut().zip(&hi).for_each(|(d, &v)| *d = v);
    }
    (low, high)
}

fn synthesize_columns(low: &Array2<f64>, high: &Array2<f64>, fb: &FilterBank) -> Array2<f64> {
    let (h2, w) = low.dim();
    let mut out = Array2::zeros((2 * h2, w));
    let mut lo = vec![0.0; h2];
    let mut hi = vec![0.0; h2];
    let mut buf = vec![0.0; 2 * h2];
    for c in 0..w {
        lo.iter_mut().zip(low.column(c)).for_each(|(d, &v)| *d = v);
        hi.iter_mut().zip(high.column(c)).for_each(|(d, &v)| *d = v);
        fb.synthesize(&lo, &hi, &mut buf);
        out.column_mut(c).iter_mut().zip(&buf).for_each(|(d, &v)| *d = v);
    }
    out
}

fn synthesize_level(ll: &Array2<f64>, bands: &DetailBands, fb: &FilterBank) -> Array2<f64> {
    let row_lo = synthesize_columns(ll, &bands.lh, fb);
    let row_hi = synthesize_columns(&bands.hl, &bands.hh, fb);
    let (h, w2) = row_lo.dim();
    let mut out = Array2::zeros((h, 2 * w2));
    let mut lo = vec![0.0; w2];
    let mut hi = vec![0.0; w2];
    let mut buf = vec![0.0; 2 * w2];
    for r in 0..h {
        lo.iter_mut().zip(row_lo.row(r)).for_each(|(d, &v)| *d = v);
        hi.iter_mut().zip(row_hi.row(r)).for_each(|(d, &v)| *d = v);
        fb.synthesize(&lo, &hi, &mut buf);
        out.row_mut(r).iter_mut().zip(&buf).for_each(|(d, &v)| *d = v);
    }
    out
}

/// Concatenates all subbands (row-major within each band) in the order given
/// by [`WaveletPyramid::bands`]. The first entry is `LL(0, 0)`.
pub fn flatten(pyr: &WaveletPyramid) -> SignalVector {
    let mut out = Vec::with_capacity(pyr.shape.coefficient_count());
    for band in pyr.bands() {
        out.extend(band.iter().copied());
    }
    SignalVector(out)
}

/// Inverse of [`flatten`].
pub fn unflatten(v: &SignalVector, shape: PyramidShape) -> Result<WaveletPyramid> {
    if v.len() != shape.coefficient_count() {
        return Err(Error::dim(shape.coefficient_count(), v.len()));
    }
    check_decomposable(shape.height, shape.width, shape.levels)?;
    let mut pyr = WaveletPyramid::zeros(shape);
    let mut offset = 0;
    for band in pyr.bands_mut() {
        for dst in band.iter_mut() {
            *dst = v.0[offset];
            offset += 1;
        }
    }
    Ok(pyr)
}

/// Index range of each subband inside the flattened vector, in flatten order,
/// tagged with its level (0 for LL).
pub fn band_layout(shape: PyramidShape) -> Vec<(usize, std::ops::Range<usize>)> {
    let mut out = Vec::with_capacity(1 + 3 * shape.levels);
    let (ah, aw) = shape.band_dims(shape.levels);
    out.push((0, 0..ah * aw));
    let mut offset = ah * aw;
    for level in (1..=shape.levels).rev() {
        let (bh, bw) = shape.band_dims(level);
        for _ in 0..3 {
            out.push((level, offset..offset + bh * bw));
            offset += bh * bw;
        }
    }
    out
}

/// Keeps the coarse approximation and zeroes every detail band.
pub fn approximation_only(pyr: &WaveletPyramid) -> WaveletPyramid {
    let mut out = WaveletPyramid::zeros(pyr.shape);
    out.approx = pyr.approx.clone();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{psnr, PEAK_8BIT};
    use crate::synth;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> GrayImage {
        let mut rng = RandomSeed(seed).rng();
        GrayImage::new(Array2::from_shape_fn((h, w), |_| rng.random::<f64>())).unwrap()
    }

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn default_bank_validates() {
        let fb = FilterBank::bior44();
        let checked = FilterBank::new(
            fb.analysis_low.clone(),
            fb.analysis_high.clone(),
            fb.synthesis_low.clone(),
            fb.synthesis_high.clone(),
        )
        .unwrap();
        assert_eq!(checked, fb);
        let sum: f64 = fb.analysis_low.iter().sum();
        assert!((sum - std::f64::consts::SQRT_2).abs() < 1e-12);
        assert_eq!(fb.support(), 9);
    }

    #[test]
    fn broken_bank_is_rejected() {
        let fb = FilterBank::bior44();
        let mut lo = fb.analysis_low.clone();
        lo[4] += 0.01;
        assert!(FilterBank::new(lo, fb.analysis_high, fb.synthesis_low, fb.synthesis_high).is_err());
        assert!(FilterBank::new(vec![1.0, 1.0], vec![1.0], vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn constant_image_has_zero_details() {
        let img = GrayImage::constant(32, 32, 0.3);
        let pyr = dwt2(&img, 4, &FilterBank::bior44()).unwrap();
        for d in &pyr.details {
            for band in [&d.lh, &d.hl, &d.hh] {
                // the published highpass taps sum to -1.4e-12, not exactly 0
                assert!(band.iter().all(|v| v.abs() < 1e-10));
            }
        }
        // DC gain is 2 per 2-D level
        let expected = 0.3 * 16.0;
        assert!(pyr.approx.iter().all(|v| (v - expected).abs() < 1e-10));
    }

    #[test]
    fn subband_sizes_halve() {
        let pyr = dwt2(&random_image(128, 128, 1), 4, &FilterBank::bior44()).unwrap();
        let sides: Vec<usize> = pyr.details.iter().map(|d| d.hh.nrows()).collect();
        assert_eq!(sides, vec![64, 32, 16, 8]);
        assert_eq!(pyr.approx.dim(), (8, 8));
    }

    #[test]
    fn too_small_is_an_error() {
        let img = random_image(24, 32, 2);
        assert!(matches!(
            dwt2(&img, 4, &FilterBank::bior44()),
            Err(Error::TooSmall { .. })
        ));
        assert!(dwt2(&img, 3, &FilterBank::bior44()).is_ok());
    }

    /// Direct 1-D convolution of an impulse, independent of the lifting of
    /// indices inside `analyze`.
    #[test]
    fn impulse_response_matches_filter_taps() {
        let n = 32;
        let pos = 16; // even, far from both borders
        let mut pixels = Array2::zeros((n, n));
        pixels[[pos, pos]] = 1.0;
        let img = GrayImage::new(pixels).unwrap();
        let fb = FilterBank::bior44();
        let pyr = dwt2(&img, 1, &fb).unwrap();
        let lo = &BIOR44_ANALYSIS_LOW;
        let hi = &BIOR44_ANALYSIS_HIGH;
        // oracle: y[i] = sum_k f[k] x[c(i) - k] for an impulse x = delta(pos)
        // gives y[i] = f[c(i) - pos], c(i) = 2i for lowpass, 2i + 1 for highpass
        let tap = |f: &[f64], offset: isize| -> f64 {
            let half = (f.len() / 2) as isize;
            if offset.abs() <= half {
                f[(offset + half) as usize]
            } else {
                0.0
            }
        };
        for i in 0..n / 2 {
            for j in 0..n / 2 {
                let lo_r = tap(lo, 2 * i as isize - pos as isize);
                let lo_c = tap(lo, 2 * j as isize - pos as isize);
                let hi_r = tap(hi, 2 * i as isize + 1 - pos as isize);
                let hi_c = tap(hi, 2 * j as isize + 1 - pos as isize);
                let d = &pyr.details[0];
                assert!((pyr.approx[[i, j]] - lo_r * lo_c).abs() < 1e-15);
                assert!((d.lh[[i, j]] - hi_r * lo_c).abs() < 1e-15);
                assert!((d.hl[[i, j]] - lo_r * hi_c).abs() < 1e-15);
                assert!((d.hh[[i, j]] - hi_r * hi_c).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn perfect_reconstruction_many_sizes() {
        let fb = FilterBank::bior44();
        for (i, side) in [32usize, 64, 128].iter().cycle().take(30).enumerate() {
            let img = random_image(*side, *side, 100 + i as u64);
            let back = idwt2(&dwt2(&img, 4, &fb).unwrap(), &fb).unwrap();
            assert!(max_abs_diff(img.pixels(), back.pixels()) < 1e-8);
        }
        // rectangular and shallow
        let img = random_image(16, 48, 7);
        let back = idwt2(&dwt2(&img, 2, &fb).unwrap(), &fb).unwrap();
        assert!(max_abs_diff(img.pixels(), back.pixels()) < 1e-8);
    }

    #[test]
    fn zero_pyramid_is_zero_image() {
        let shape = PyramidShape {
            height: 32,
            width: 32,
            levels: 4,
        };
        let img = idwt2(&WaveletPyramid::zeros(shape), &FilterBank::bior44()).unwrap();
        assert!(img.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn inconsistent_pyramid_is_rejected() {
        let mut pyr = dwt2(&random_image(32, 32, 4), 2, &FilterBank::bior44()).unwrap();
        pyr.details[1].hh = Array2::zeros((3, 3));
        assert!(idwt2(&pyr, &FilterBank::bior44()).is_err());
    }

    #[test]
    fn approximation_only_regression() {
        let img = synth::dead_leaves(128, 128, &synth::SceneParams::default(), RandomSeed(11));
        let fb = FilterBank::bior44();
        let smooth = idwt2(&approximation_only(&dwt2(&img, 4, &fb).unwrap()), &fb).unwrap();
        let p = psnr(&img, &smooth, PEAK_8BIT).unwrap();
        assert!(p.is_finite() && p > 0.0);
        // frozen from a run of this exact configuration
        assert!((p - 20.578835408470).abs() < 1e-9, "psnr {p}");
    }

    #[test]
    fn flatten_layout() {
        let img = random_image(64, 64, 5);
        let pyr = dwt2(&img, 4, &FilterBank::bior44()).unwrap();
        let v = flatten(&pyr);
        assert_eq!(v.len(), 64 * 64);
        assert_eq!(v.0[0], pyr.approx[[0, 0]]);
        assert_eq!(unflatten(&v, pyr.shape).unwrap(), pyr);
        assert!(unflatten(&SignalVector(vec![0.0; 10]), pyr.shape).is_err());
        let layout = band_layout(pyr.shape);
        assert_eq!(layout.len(), 13);
        assert_eq!(layout.last().unwrap().1.end, 64 * 64);
        assert_eq!(layout[1].1.len(), 16); // coarsest LH is 4x4
    }

    #[test]
    fn energy_is_nearly_preserved_on_natural_images() {
        // The pair is biorthogonal, so energy is only approximately kept.
        // Measured over these 200 scenes: mean |dev| 0.013, 5 scenes above
        // 0.05, worst 0.16 (a dark high-contrast scene).
        let fb = FilterBank::bior44();
        let devs: Vec<f64> = (0..200)
            .map(|seed| {
                let img = synth::dead_leaves(128, 128, &synth::SceneParams::default(), RandomSeed(seed));
                let v = flatten(&dwt2(&img, 4, &fb).unwrap());
                let ec: f64 = v.0.iter().map(|c| c * c).sum();
                let ei: f64 = img.pixels().iter().map(|c| c * c).sum();
                ((ec - ei) / ei).abs()
            })
            .collect();
        let mean = devs.iter().sum::<f64>() / devs.len() as f64;
        let within = devs.iter().filter(|&&d| d < 0.05).count();
        assert!(mean < 0.02, "mean deviation {mean}");
        assert!(within >= 190, "{within}/200 within 5%");
        assert!(devs.iter().all(|&d| d < 0.2));
    }

    #[test]
    fn natural_images_are_sparse_in_wavelets() {
        let fb = FilterBank::bior44();
        for seed in 0..5 {
            let img = synth::dead_leaves(128, 128, &synth::SceneParams::default(), RandomSeed(seed));
            let pyr = dwt2(&img, 4, &fb).unwrap();
            let v = flatten(&pyr);
            let max = v.0.iter().fold(0.0f64, |m, c| m.max(c.abs()));
            let ll = pyr.approx.len();
            let details = &v.0[ll..];
            let small = details.iter().filter(|c| c.abs() < 0.01 * max).count();
            assert!(small as f64 / details.len() as f64 >= 0.7);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn reconstruction_property(levels in 1usize..=4, hm in 1usize..4, wm in 1usize..4, seed in any::<u64>()) {
            let step = 1 << levels;
            let img = random_image(step * hm, step * wm, seed);
            let fb = FilterBank::bior44();
            let pyr = dwt2(&img, levels, &fb).unwrap();
            let back = idwt2(&unflatten(&flatten(&pyr), pyr.shape).unwrap(), &fb).unwrap();
            prop_assert!(max_abs_diff(img.pixels(), back.pixels()) < 1e-8);
        }
    }
}
