//! Wavelet image codec: 4-level biorthogonal 4.4 transform, dead-zone
//! uniform quantizer, context-adaptive binary range coding of the indices.
//!
//! Stream layout (all integers little-endian):
//!
//! ```text
//! offset size field
//! 0      4    magic "CSFJ"
//! 4      1    version (1 = bior4.4, whole-point symmetric extension)
//! 5      2    height (u16)
//! 7      2    width (u16)
//! 9      1    levels (u8)
//! 10     4    quantizer step q (f32)
//! 14     4    payload length in bytes (u32)
//! 18     ..   range-coded payload
//! ```
//!
//! Subbands are coded in flatten order (LL, then LH/HL/HH from the coarsest
//! level down), row-major inside each band. LL indices are coded as the
//! residual against the left neighbour (the upper one in column 0).

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::range_coder::{BitModel, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::wavelet::{self, FilterBank, PyramidShape};

pub const MAGIC: &[u8; 4] = b"CSFJ";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;

/// Bounds of the quantizer-step search used by rate control.
const STEP_MIN: f64 = 1e-5;
const STEP_MAX: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedStream {
    pub height: usize,
    pub width: usize,
    pub levels: usize,
    /// Quantizer step exactly as stored (f32 precision).
    pub step: f32,
    pub payload: Vec<u8>,
}

impl CompressedStream {
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    /// Input size over total stream size, counting the header. The input is
    /// one byte per pixel.
    pub fn ratio(&self) -> f64 {
        (self.height * self.width) as f64 / self.byte_len() as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.push(self.levels as u8);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::MalformedStream(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(bad("shorter than the header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if bytes[4] != VERSION {
            return Err(Error::MalformedStream(format!("unsupported version {}", bytes[4])));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]) as usize;
        let u32_at = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let height = u16_at(5);
        let width = u16_at(7);
        let levels = bytes[9] as usize;
        let step = f32::from_bits(u32_at(10));
        let len = u32_at(14) as usize;
        if bytes.len() != HEADER_LEN + len {
            return Err(Error::MalformedStream(format!(
                "payload length {} does not match header {}",
                bytes.len() - HEADER_LEN,
                len
            )));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(bad("non-positive quantizer step"));
        }
        wavelet::check_decomposable(height, width, levels).map_err(|e| Error::MalformedStream(e.to_string()))?;
        Ok(Self {
            height,
            width,
            levels,
            step,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jp2Config {
    /// Target compression ratio `R_c`.
    pub target_ratio: f64,
    /// Accepted relative deviation of the achieved ratio.
    pub tolerance: f64,
    pub levels: usize,
    pub max_steps: usize,
}

impl Default for Jp2Config {
    fn default() -> Self {
        Self {
            target_ratio: 54.0,
            tolerance: 0.05,
            levels: 4,
            max_steps: 40,
        }
    }
}

impl Jp2Config {
    pub fn with_ratio(target_ratio: f64) -> Self {
        Self {
            target_ratio,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.target_ratio >= 1.0) || !self.target_ratio.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "target ratio {} < 1",
                self.target_ratio
            )));
        }
        if !(self.tolerance > 0.0) || self.max_steps == 0 {
            return Err(Error::InvalidParameter(
                "rate control needs a tolerance and steps".into(),
            ));
        }
        Ok(())
    }
}

/// Dead-zone quantizer index.
pub fn quantize(c: f64, step: f64) -> i64 {
    let m = (c.abs() / step).floor() as i64;
    if c < 0.0 {
        -m
    } else {
        m
    }
}

/// Mid-point reconstruction; the dead zone maps back to 0.
pub fn dequantize(i: i64, step: f64) -> f64 {
    match i {
        0 => 0.0,
        _ => (i.unsigned_abs() as f64 + 0.5) * step * i.signum() as f64,
    }
}

/// Encodes with a fixed quantizer step.
pub fn encode_with_step(img: &GrayImage, step: f64, levels: usize) -> Result<CompressedStream> {
    let (h, w) = img.dim();
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::InvalidParameter(format!(
            "{h}x{w} exceeds the 16-bit header fields"
        )));
    }
    let step = step as f32;
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidParameter(format!("quantizer step {step}")));
    }
    let pyr = wavelet::dwt2(img, levels, &FilterBank::bior44())?;
    let q = f64::from(step);
    let mut coder = CoefficientCoder::new(levels);
    let mut enc = Encoder::default();
    for (class, band) in band_classes(levels).into_iter().zip(pyr.bands()) {
        let idx = band.mapv(|c| quantize(c, q));
        coder.encode_band(&mut enc, class, &idx);
    }
    Ok(CompressedStream {
        height: h,
        width: w,
        levels,
        step,
        payload: enc.finish(),
    })
}

/// Rate-controlled encode: bisection on `log q` until the achieved ratio is
/// within the configured tolerance of the target.
pub fn jp2_encode(img: &GrayImage, cfg: &Jp2Config) -> Result<CompressedStream> {
    cfg.validate()?;
    let target = cfg.target_ratio;
    let mut lo = STEP_MIN.ln();
    let mut hi = STEP_MAX.ln();
    let mut best: Option<(f64, CompressedStream)> = None;
    let consider = |s: CompressedStream, best: &mut Option<(f64, CompressedStream)>| -> bool {
        let err = (s.ratio() - target).abs() / target;
        let ok = err <= cfg.tolerance;
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            *best = Some((err, s));
        }
        ok
    };
    for _ in 0..cfg.max_steps {
        let mid = 0.5 * (lo + hi);
        let s = encode_with_step(img, mid.exp(), cfg.levels)?;
        let r = s.ratio();
        if consider(s, &mut best) {
            break;
        }
        if r < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    match best {
        Some((err, s)) if err <= cfg.tolerance => Ok(s),
        Some((_, s)) => Err(Error::RateControl {
            target,
            best_ratio: s.ratio(),
        }),
        None => Err(Error::RateControl {
            target,
            best_ratio: f64::NAN,
        }),
    }
}

/// Decodes and clamps to `[0, 1]`.
pub fn jp2_decode(stream: &CompressedStream) -> Result<GrayImage> {
    wavelet::check_decomposable(stream.height, stream.width, stream.levels)
        .map_err(|e| Error::MalformedStream(e.to_string()))?;
    let shape = PyramidShape {
        height: stream.height,
        width: stream.width,
        levels: stream.levels,
    };
    let q = f64::from(stream.step);
    let mut dec = Decoder::new(&stream.payload)?;
    let mut coder = CoefficientCoder::new(stream.levels);
    let mut coeffs = Vec::with_capacity(shape.coefficient_count());
    for (class, (_, range)) in band_classes(stream.levels).into_iter().zip(wavelet::band_layout(shape)) {
        let (bh, bw) = band_dims(shape, class);
        debug_assert_eq!(bh * bw, range.len());
        let idx = coder.decode_band(&mut dec, class, bh, bw)?;
        coeffs.extend(idx.iter().map(|&i| dequantize(i, q)));
    }
    let pyr = wavelet::unflatten(&coeffs.into(), shape)?;
    Ok(wavelet::idwt2(&pyr, &FilterBank::bior44())?.clamped())
}

pub fn jp2_decode_bytes(bytes: &[u8]) -> Result<GrayImage> {
    jp2_decode(&CompressedStream::from_bytes(bytes)?)
}

/// Which context set codes a band.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BandClass {
    Approx,
    Detail(usize),
}

fn band_classes(levels: usize) -> Vec<BandClass> {
    let mut out = vec![BandClass::Approx];
    for level in (1..=levels).rev() {
        out.extend([BandClass::Detail(level); 3]);
    }
    out
}

fn band_dims(shape: PyramidShape, class: BandClass) -> (usize, usize) {
    let level = match class {
        BandClass::Approx => shape.levels,
        BandClass::Detail(l) => l,
    };
    (shape.height >> level, shape.width >> level)
}

const UNARY_BINS: usize = 14;
const ESCAPE_BITS: usize = 40;

#[derive(Clone)]
struct IntModels {
    zero: [BitModel; 3],
    sign: BitModel,
    unary: [BitModel; UNARY_BINS],
    prefix: [BitModel; ESCAPE_BITS],
    suffix: [BitModel; ESCAPE_BITS],
}

impl Default for IntModels {
    fn default() -> Self {
        Self {
            zero: [BitModel::default(); 3],
            sign: BitModel::default(),
            unary: [BitModel::default(); UNARY_BINS],
            prefix: [BitModel::default(); ESCAPE_BITS],
            suffix: [BitModel::default(); ESCAPE_BITS],
        }
    }
}

/// Per-class adaptive models. Index 0 is the LL residual coder, `l` the
/// detail bands of level `l`. Each band starts with one "all zero" flag.
struct CoefficientCoder {
    models: Vec<IntModels>,
    empty_band: BitModel,
}

impl CoefficientCoder {
    fn new(levels: usize) -> Self {
        Self {
            models: vec![IntModels::default(); levels + 1],
            empty_band: BitModel::default(),
        }
    }

    fn slot(class: BandClass) -> usize {
        match class {
            BandClass::Approx => 0,
            BandClass::Detail(l) => l,
        }
    }

    /// Number of nonzero causal neighbours (left, up), capped at 2.
    fn neighbourhood(sym: &Array2<i64>, r: usize, c: usize) -> usize {
        let left = c > 0 && sym[[r, c - 1]] != 0;
        let up = r > 0 && sym[[r - 1, c]] != 0;
        left as usize + up as usize
    }

    fn ll_prediction(idx: &Array2<i64>, r: usize, c: usize) -> i64 {
        match (r, c) {
            (0, 0) => 0,
            (_, 0) => idx[[r - 1, 0]],
            _ => idx[[r, c - 1]],
        }
    }

    fn encode_band(&mut self, enc: &mut Encoder, class: BandClass, idx: &Array2<i64>) {
        let empty = idx.iter().all(|&v| v == 0);
        enc.encode(&mut self.empty_band, empty);
        if empty {
            return;
        }
        let m = &mut self.models[Self::slot(class)];
        let (h, w) = idx.dim();
        let mut sym = Array2::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let v = match class {
                    BandClass::Approx => idx[[r, c]] - Self::ll_prediction(idx, r, c),
                    BandClass::Detail(_) => idx[[r, c]],
                };
                let ctx = Self::neighbourhood(&sym, r, c);
                encode_int(enc, m, ctx, v);
                sym[[r, c]] = v;
            }
        }
    }

    fn decode_band(&mut self, dec: &mut Decoder, class: BandClass, h: usize, w: usize) -> Result<Array2<i64>> {
        let mut idx = Array2::zeros((h, w));
        if dec.decode(&mut self.empty_band)? {
            return Ok(idx);
        }
        let m = &mut self.models[Self::slot(class)];
        let mut sym = Array2::zeros((h, w));
        for r in 0..h {
            for c in 0..w {
                let ctx = Self::neighbourhood(&sym, r, c);
                let v = decode_int(dec, m, ctx)?;
                sym[[r, c]] = v;
                idx[[r, c]] = match class {
                    BandClass::Approx => v + Self::ll_prediction(&idx, r, c),
                    BandClass::Detail(_) => v,
                };
            }
        }
        Ok(idx)
    }
}

fn encode_int(enc: &mut Encoder, m: &mut IntModels, ctx: usize, v: i64) {
    enc.encode(&mut m.zero[ctx], v != 0);
    if v == 0 {
        return;
    }
    enc.encode(&mut m.sign, v < 0);
    let rest = v.unsigned_abs() - 1;
    for bin in 0..UNARY_BINS {
        let more = rest > bin as u64;
        enc.encode(&mut m.unary[bin], more);
        if !more {
            return;
        }
    }
    // Exp-Golomb for the tail
    let e = rest - UNARY_BINS as u64 + 1;
    let nbits = 64 - e.leading_zeros() as usize;
    for i in 0..nbits - 1 {
        enc.encode(&mut m.prefix[i], true);
    }
    enc.encode(&mut m.prefix[nbits - 1], false);
    for i in (0..nbits - 1).rev() {
        enc.encode(&mut m.suffix[i], (e >> i) & 1 == 1);
    }
}

fn decode_int(dec: &mut Decoder, m: &mut IntModels, ctx: usize) -> Result<i64> {
    if !dec.decode(&mut m.zero[ctx])? {
        return Ok(0);
    }
    let negative = dec.decode(&mut m.sign)?;
    let mut rest = 0u64;
    let mut escaped = true;
    for bin in 0..UNARY_BINS {
        if dec.decode(&mut m.unary[bin])? {
            rest += 1;
        } else {
            escaped = false;
            break;
        }
    }
    if escaped {
        let mut nbits = 1;
        while dec.decode(&mut m.prefix[nbits - 1])? {
            nbits += 1;
            if nbits > ESCAPE_BITS {
                return Err(Error::MalformedStream("escape code too long".into()));
            }
        }
        let mut e = 1u64;
        for i in (0..nbits - 1).rev() {
            e = (e << 1) | dec.decode(&mut m.suffix[i])? as u64;
        }
        rest = e + UNARY_BINS as u64 - 1;
    }
    let mag = (rest + 1) as i64;
    Ok(if negative { -mag } else { mag })
}
