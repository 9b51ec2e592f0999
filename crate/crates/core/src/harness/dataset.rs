//! Patch extraction, three-class dataset generation, and the hold-out split.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conventional::{calibrate_against, jp2_pipeline, Calibration, Jp2Config};
use crate::cs::{cs_pipeline_batch, CsConfig};
use crate::error::{Error, Result};
use crate::image::{ClassLabel, GrayImage, RandomSeed};
use crate::io;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// Patches whose pixel standard deviation is below one grey level are
/// skipped: they carry no blur information.
const FLAT_STD: f64 = 1.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Learn,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory.
    pub path: String,
    pub label: ClassLabel,
    /// Sampling rate for CS, compression ratio for JP2, none for RAW.
    pub ratio: Option<f64>,
    pub subclass: String,
    pub split: Split,
    pub patch_id: usize,
    /// Seed of the pipeline that produced the image, if it used one.
    pub seed: Option<RandomSeed>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchSource {
    pub id: usize,
    pub file: String,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCalibration {
    pub rate: f64,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: RandomSeed,
    pub n_r: usize,
    pub rates: Vec<f64>,
    pub patch_side: usize,
    pub learn_fraction: f64,
    pub corpus: Vec<CorpusFile>,
    pub patches: Vec<PatchSource>,
    pub calibrations: Vec<RateCalibration>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: RandomSeed,
    pub n_r: usize,
    pub rates: Vec<f64>,
    pub patch_side: usize,
    pub learn_fraction: f64,
    /// Template for the CS pipeline; rate and seed are set per sub-class.
    pub cs: CsConfig,
    /// Template for the codec; the ratio comes from calibration.
    pub jp2: Jp2Config,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: RandomSeed::default(),
            n_r: 60,
            rates: vec![0.25, 0.4, 0.5, 0.67],
            patch_side: 128,
            learn_fraction: 0.75,
            cs: CsConfig::default(),
            jp2: Jp2Config::default(),
        }
    }
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported manifest version {}", m.format_version),
            ));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_string(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, label: ClassLabel) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn load_image(&self, root: &Path, entry: &ManifestEntry) -> Result<GrayImage> {
        io::read_image(&root.join(&entry.path))
    }

    /// Checks that every file exists and matches its recorded digest.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for e in &self.entries {
            let digest = io::file_sha256(&root.join(&e.path))?;
            if digest != e.sha256 {
                return Err(Error::Dataset(format!("{} does not match its recorded digest", e.path)));
            }
        }
        Ok(())
    }
}

/// Short stable tag for a sampling rate, e.g. `r25`.
pub fn rate_tag(rate: f64) -> String {
    format!("r{:02}", (rate * 100.0).round() as u32)
}

/// Corpus images (PGM or BMP) in file-name order.
pub fn list_corpus(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "bmp"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Non-overlapping `side x side` patches of every corpus image, row-major
/// within each file, with flat patches removed. Ids count all tiles,
/// including the removed ones, so they stay stable.
pub fn extract_patches(files: &[PathBuf], side: usize) -> Result<Vec<(PatchSource, GrayImage)>> {
    let mut out = Vec::new();
    let mut next_id = 0;
    for path in files {
        let img = io::read_image(path)?;
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let (h, w) = img.dim();
        for r in 0..h / side {
            for c in 0..w / side {
                let patch = img.crop(r * side, c * side, side, side)?;
                let id = next_id;
                next_id += 1;
                let mean = patch.mean();
                let var = patch.pixels().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (side * side) as f64;
                if var.sqrt() < FLAT_STD {
                    continue;
                }
                out.push((
                    PatchSource {
                        id,
                        file: name.clone(),
                        row: r * side,
                        col: c * side,
                    },
                    patch,
                ));
            }
        }
    }
    Ok(out)
}

fn learn_count(n: usize, fraction: f64) -> usize {
    ((n as f64) * fraction).round() as usize
}

/// Generates every class from the corpus and writes images plus
/// `manifest.json` under `out_dir`.
///
/// `N_r` patches form the CS/JP2 source set; `N_r (|S| - 1)` further
/// distinct patches join them in the RAW class so all classes have
/// `N_r |S|` images. The codec ratio for each sampling rate is calibrated on
/// the learning part of the source set.
pub fn build_dataset(corpus_dir: &Path, out_dir: &Path, cfg: &DatasetConfig) -> Result<DatasetManifest> {
    if cfg.rates.is_empty() || cfg.n_r < 2 {
        return Err(Error::InvalidParameter("need at least one rate and N_r >= 2".into()));
    }
    let mut tags: Vec<String> = cfg.rates.iter().map(|&r| rate_tag(r)).collect();
    tags.sort();
    tags.dedup();
    if tags.len() != cfg.rates.len() {
        return Err(Error::InvalidParameter(
            "sampling rates must differ at percent precision".into(),
        ));
    }
    let files = list_corpus(corpus_dir)?;
    let corpus: Vec<CorpusFile> = files
        .iter()
        .map(|p| {
            Ok(CorpusFile {
                name: p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
                sha256: io::file_sha256(p)?,
            })
        })
        .collect::<Result<_>>()?;
    let patches = extract_patches(&files, cfg.patch_side)?;
    let s = cfg.rates.len();
    let needed = cfg.n_r * s;
    if patches.len() < needed {
        return Err(Error::Dataset(format!(
            "corpus has {} usable {}x{} patches; {needed} are needed",
            patches.len(),
            cfg.patch_side,
            cfg.patch_side
        )));
    }

    let mut rng = cfg.seed.derive(1).rng();
    let drawn = index::sample(&mut rng, patches.len(), needed).into_vec();
    let mut source: Vec<usize> = drawn[..cfg.n_r].to_vec();
    let mut others: Vec<usize> = drawn[cfg.n_r..].to_vec();
    source.sort_by_key(|&i| patches[i].0.id);
    others.sort_by_key(|&i| patches[i].0.id);
    let n_learn = learn_count(cfg.n_r, cfg.learn_fraction);
    let split_of = |rank: usize| if rank < n_learn { Split::Learn } else { Split::Test };

    let images_dir = out_dir.join("images");
    let mut entries = Vec::new();
    let mut write_entry = |label: ClassLabel,
                           subclass: &str,
                           rank: usize,
                           patch: &PatchSource,
                           img: &GrayImage,
                           ratio: Option<f64>,
                           seed: Option<RandomSeed>|
     -> Result<()> {
        let id = format!("{subclass}/p{:05}", patch.id);
        let rel = format!("images/{id}.pgm");
        let bytes = io::pgm_bytes(img);
        io::write_pgm(&out_dir.join(&rel), img)?;
        entries.push(ManifestEntry {
            id,
            path: rel,
            label,
            ratio,
            subclass: subclass.to_string(),
            split: split_of(rank),
            patch_id: patch.id,
            seed,
            sha256: io::sha256_hex(&bytes),
        });
        Ok(())
    };
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let originals: Vec<GrayImage> = source.iter().map(|&i| patches[i].1.clone()).collect();
    let learn_originals = &originals[..n_learn];
    let mut calibrations = Vec::new();
    for (k, &rate) in cfg.rates.iter().enumerate() {
        let tag = rate_tag(rate);
        let cs_cfg = CsConfig {
            rate,
            seed: cfg.seed.derive(100 + k as u64),
            ..cfg.cs.clone()
        };
        let cs_out: Vec<GrayImage> = cs_pipeline_batch(&originals, &cs_cfg)?
            .into_iter()
            .map(|o| o.image.quantized())
            .collect();
        for (rank, (&i, img)) in source.iter().zip(&cs_out).enumerate() {
            write_entry(
                ClassLabel::Cs,
                &format!("C/{tag}"),
                rank,
                &patches[i].0,
                img,
                Some(rate),
                Some(cs_cfg.seed),
            )?;
        }

        let calibration = calibrate_against(learn_originals, &cs_out[..n_learn], &cfg.jp2)?;
        let jp2_cfg = Jp2Config {
            target_ratio: calibration.ratio,
            ..cfg.jp2.clone()
        };
        let jp2_out: Vec<GrayImage> = originals
            .par_iter()
            .map(|img| Ok(jp2_pipeline(img, &jp2_cfg)?.quantized()))
            .collect::<Result<_>>()?;
        for (rank, (&i, img)) in source.iter().zip(&jp2_out).enumerate() {
            write_entry(
                ClassLabel::Jp2,
                &format!("J/{tag}"),
                rank,
                &patches[i].0,
                img,
                Some(calibration.ratio),
                None,
            )?;
        }
        calibrations.push(RateCalibration { rate, calibration });
    }

    // RAW: the source set, then the extra patches in groups of N_r
    for (rank, &i) in source.iter().enumerate() {
        write_entry(ClassLabel::Raw, "R/s0", rank, &patches[i].0, &patches[i].1, None, None)?;
    }
    for (g, group) in others.chunks(cfg.n_r).enumerate() {
        let sub = format!("R/s{}", g + 1);
        for (rank, &i) in group.iter().enumerate() {
            write_entry(ClassLabel::Raw, &sub, rank, &patches[i].0, &patches[i].1, None, None)?;
        }
    }

    let mut used: Vec<PatchSource> = drawn.iter().map(|&i| patches[i].0.clone()).collect();
    used.sort_by_key(|p| p.id);
    let mut manifest = DatasetManifest {
        format_version: MANIFEST_FORMAT_VERSION,
        seed: cfg.seed,
        n_r: cfg.n_r,
        rates: cfg.rates.clone(),
        patch_side: cfg.patch_side,
        learn_fraction: cfg.learn_fraction,
        corpus,
        patches: used,
        calibrations,
        entries,
    };
    holdout_split(&mut manifest)?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Assigns the first `round(fraction * count)` entries of every sub-class
/// (in patch-id order) to the learning split and the rest to the test split.
pub fn holdout_split(manifest: &mut DatasetManifest) -> Result<()> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        groups.entry(e.subclass.clone()).or_default().push(i);
    }
    for (name, mut idx) in groups {
        if idx.len() < 2 {
            return Err(Error::Dataset(format!(
                "sub-class {name} has {} entries; need 2",
                idx.len()
            )));
        }
        idx.sort_by_key(|&i| manifest.entries[i].patch_id);
        let n_learn = learn_count(idx.len(), manifest.learn_fraction);
        for (rank, &i) in idx.iter().enumerate() {
            manifest.entries[i].split = if rank < n_learn { Split::Learn } else { Split::Test };
        }
    }
    Ok(())
}
