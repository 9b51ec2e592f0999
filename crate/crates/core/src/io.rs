//! File formats: 8-bit binary PGM (read/write), 8-bit BMP (read), and
//! row-major CSV for vectors and small matrices.
//!
//! Reals are written with Rust's shortest round-trip formatting, so parsing a
//! written CSV reproduces every value bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageFormat, ImageReader};
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::GrayImage;

/// Reads a PGM or BMP file. Colour inputs are converted to luma.
pub fn read_image(path: &Path) -> Result<GrayImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| Error::format(path, e))?;
    let luma = decoded.to_luma8();
    let (w, h) = luma.dimensions();
    GrayImage::from_u8(h as usize, w as usize, luma.as_raw())
}

/// Writes a binary (P5) 8-bit PGM.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let bytes = pgm_bytes(img);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Encoded P5 file contents for `img`.
pub fn pgm_bytes(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(&img.to_u8());
    out
}

/// Decodes P5 contents produced by [`pgm_bytes`] or any conforming writer.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
        .map_err(|e| Error::format("<memory>", e))?
        .to_luma8();
    let (w, h) = img.dimensions();
    GrayImage::from_u8(h as usize, w as usize, img.as_raw())
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Writes one vector per line, comma separated.
pub fn write_rows_csv(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        push_row(&mut out, row);
    }
    write_string(path, &out)
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|t| {
                    t.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
                })
                .collect()
        })
        .collect()
}

pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let rows: Vec<Vec<f64>> = m.rows().into_iter().map(|r| r.to_vec()).collect();
    write_rows_csv(path, &rows)
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let rows = read_rows_csv(path)?;
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::format(path, "ragged matrix rows"));
    }
    Array2::from_shape_vec((h, w), rows.into_iter().flatten().collect()).map_err(|e| Error::format(path, e))
}

pub(crate) fn push_row(out: &mut String, row: &[f64]) {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&v.to_string());
    }
    out.push('\n');
}

pub(crate) fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}
