//! Simulation of compressive, raw, and compressed conventional imaging
//! pipelines, blind blur-kernel fingerprints, and classifiers that identify
//! which pipeline produced an image.

pub mod chu;
pub mod conventional;
pub mod cs;
pub mod error;
pub mod harness;
pub mod image;
pub mod io;
pub mod kernel;
pub mod learn;
pub mod synth;
pub mod wavelet;

pub use error::{Error, Result};
pub use image::{inverse_raster_scan, psnr, raster_scan, ClassLabel, GrayImage, RandomSeed, SignalVector, PEAK_8BIT};
