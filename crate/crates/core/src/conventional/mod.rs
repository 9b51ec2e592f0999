//! Conventional imaging: the lossless raw pipeline and the wavelet-codec
//! pipeline, with PSNR-matched selection of the compression ratio.

pub mod codec;
mod range_coder;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use codec::{encode_with_step, jp2_decode, jp2_decode_bytes, jp2_encode, CompressedStream, Jp2Config};

use crate::cs::{cs_pipeline_batch, CsConfig};
use crate::error::{Error, Result};
use crate::image::{psnr, GrayImage, PEAK_8BIT};

/// Raw acquisition is lossless: the output is the input.
pub fn raw_pipeline(img: &GrayImage) -> GrayImage {
    img.clone()
}

pub fn jp2_pipeline(img: &GrayImage, cfg: &Jp2Config) -> Result<GrayImage> {
    jp2_decode(&jp2_encode(img, cfg)?)
}

/// Outcome of matching the codec's mean PSNR to the CS pipeline's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ratio: f64,
    pub cs_mean_psnr: f64,
    pub jp2_mean_psnr: f64,
    pub images: usize,
    pub steps: usize,
}

/// Search range for the matched compression ratio.
const RATIO_MIN: f64 = 1.5;
const RATIO_MAX: f64 = 400.0;
/// Accepted gap between the two mean PSNRs, in dB.
pub const CALIBRATION_TOLERANCE_DB: f64 = 0.5;

/// Runs the CS pipeline over `images`, then finds the ratio at which the
/// codec's mean PSNR matches. PSNRs are measured on 8-bit outputs, as the
/// images would be stored.
pub fn calibrate_ratio(images: &[GrayImage], cs_cfg: &CsConfig, template: &Jp2Config) -> Result<Calibration> {
    let outputs = cs_pipeline_batch(images, cs_cfg)?;
    let cs: Vec<GrayImage> = outputs.into_iter().map(|o| o.image).collect();
    calibrate_against(images, &cs, template)
}

/// Same as [`calibrate_ratio`] with CS reconstructions computed elsewhere.
pub fn calibrate_against(
    originals: &[GrayImage],
    cs_outputs: &[GrayImage],
    template: &Jp2Config,
) -> Result<Calibration> {
    if originals.is_empty() || originals.len() != cs_outputs.len() {
        return Err(Error::InvalidParameter(format!(
            "calibration needs matching non-empty sets ({} originals, {} reconstructions)",
            originals.len(),
            cs_outputs.len()
        )));
    }
    let cs_mean = mean_psnr(originals, cs_outputs)?;
    let jp2_mean = |ratio: f64| -> Result<f64> {
        let cfg = Jp2Config {
            target_ratio: ratio,
            ..template.clone()
        };
        let decoded: Vec<GrayImage> = originals
            .par_iter()
            .map(|img| Ok(jp2_pipeline(img, &cfg)?.quantized()))
            .collect::<Result<_>>()?;
        mean_psnr(originals, &decoded)
    };

    let p_lo = jp2_mean(RATIO_MIN)?;
    if p_lo < cs_mean - CALIBRATION_TOLERANCE_DB {
        return Err(Error::Calibration {
            target_psnr: cs_mean,
            detail: format!("codec reaches only {p_lo:.2} dB at ratio {RATIO_MIN}"),
        });
    }
    let mut lo = RATIO_MIN.ln();
    let mut hi = RATIO_MAX.ln();
    let mut best: Option<(f64, f64, f64)> = None;
    for step in 1..=40 {
        let mid = 0.5 * (lo + hi);
        let ratio = mid.exp();
        // a ratio no image can reach counts as "too much compression"
        let p = match jp2_mean(ratio) {
            Ok(p) => p,
            Err(Error::RateControl { .. }) => {
                hi = mid;
                continue;
            }
            Err(e) => return Err(e),
        };
        let gap = (p - cs_mean).abs();
        if best.is_none_or(|(g, _, _)| gap < g) {
            best = Some((gap, ratio, p));
        }
        if gap <= CALIBRATION_TOLERANCE_DB {
            return Ok(Calibration {
                ratio,
                cs_mean_psnr: cs_mean,
                jp2_mean_psnr: p,
                images: originals.len(),
                steps: step,
            });
        }
        // PSNR falls as the ratio grows
        if p > cs_mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Calibration {
        target_psnr: cs_mean,
        detail: match best {
            Some((_, ratio, p)) => format!("closest ratio {ratio:.3} gives {p:.2} dB"),
            None => "no ratio in range was reachable".into(),
        },
    })
}

fn mean_psnr(reference: &[GrayImage], test: &[GrayImage]) -> Result<f64> {
    let mut sum = 0.0;
    for (r, t) in reference.iter().zip(test) {
        sum += psnr(r, &t.quantized(), PEAK_8BIT)?;
    }
    Ok(sum / reference.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::RandomSeed;
    use crate::io;
    use crate::synth;

    fn scenes(n: u64, seed: u64) -> Vec<GrayImage> {
        (0..n)
            .map(|s| synth::dead_leaves(64, 64, &synth::SceneParams::default(), RandomSeed(seed + s)))
            .collect()
    }

    #[test]
    fn raw_is_identity() {
        let img = scenes(1, 1).remove(0);
        let out = raw_pipeline(&img);
        assert_eq!(io::pgm_bytes(&out), io::pgm_bytes(&img));
        assert_eq!(raw_pipeline(&out), out);
        assert_eq!(crate::raster_scan(&out), crate::raster_scan(&img));
    }

    #[test]
    fn calibration_matches_mean_psnr() {
        let imgs = scenes(4, 20);
        let mut ratios = Vec::new();
        for rate in [0.25, 0.5] {
            let cal = calibrate_ratio(&imgs, &CsConfig::with_rate(rate, RandomSeed(2)), &Jp2Config::default()).unwrap();
            assert!((cal.jp2_mean_psnr - cal.cs_mean_psnr).abs() <= CALIBRATION_TOLERANCE_DB);
            ratios.push(cal.ratio);
        }
        assert!(ratios[0] > ratios[1], "{ratios:?}");
    }

    #[test]
    fn single_image_calibration() {
        let imgs = scenes(1, 30);
        let cal = calibrate_ratio(&imgs, &CsConfig::with_rate(0.4, RandomSeed(3)), &Jp2Config::default()).unwrap();
        assert!(cal.ratio >= RATIO_MIN && cal.ratio <= RATIO_MAX);
        assert_eq!(cal.images, 1);
    }

    #[test]
    fn calibration_rejects_unbracketed_targets() {
        let imgs = scenes(2, 40);
        // a perfect "reconstruction" is out of reach of any ratio in range
        let err = calibrate_against(&imgs, &imgs, &Jp2Config::default()).unwrap_err();
        assert!(matches!(err, Error::Calibration { .. }));
        assert!(calibrate_against(&[], &[], &Jp2Config::default()).is_err());
    }
}
