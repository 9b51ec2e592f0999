//! Kernel estimation over a dataset, stored as one CSV row per image.
//!
//! The CSV is written incrementally, so an interrupted run picks up where it
//! stopped: rows already present are kept and only missing ids are computed.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::dataset::{DatasetManifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::image::ClassLabel;
use crate::io;
use crate::kernel::{estimate_kernel, kernel_csv_row, BlurKernel, DeconvConfig};

/// Rows computed between two flushes of the CSV.
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelRecord {
    pub id: String,
    pub label: ClassLabel,
    pub ratio: Option<f64>,
    pub kernel: BlurKernel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable {
    pub side: usize,
    pub records: Vec<KernelRecord>,
}

#[derive(Debug, Clone)]
pub struct KernelRun {
    pub table: KernelTable,
    pub failures: Vec<KernelFailure>,
    pub reused: usize,
    pub computed: usize,
}

fn header(side: usize) -> String {
    let mut h = String::from("id,label,ratio");
    for i in 0..side * side {
        h.push_str(&format!(",k{i}"));
    }
    h
}

impl KernelTable {
    pub fn get(&self, id: &str) -> Option<&KernelRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn index(&self) -> HashMap<&str, &KernelRecord> {
        self.records.iter().map(|r| (r.id.as_str(), r)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = header(self.side);
        out.push('\n');
        for r in &self.records {
            out.push_str(&kernel_csv_row(&r.id, r.label.code(), r.ratio, &r.kernel));
            out.push('\n');
        }
        io::write_string(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let head = lines.next().ok_or_else(|| Error::format(path, "empty kernel file"))?;
        let cols = head.split(',').count();
        let side = (cols.saturating_sub(3) as f64).sqrt().round() as usize;
        if side == 0 || side * side + 3 != cols || head != header(side) {
            return Err(Error::format(path, "unexpected kernel CSV header"));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", n + 2));
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(bad("wrong column count"));
            }
            let label: ClassLabel = fields[1].parse().map_err(|_| bad("unknown label"))?;
            let ratio = match fields[2] {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|_| bad("bad ratio"))?),
            };
            let entries = fields[3..]
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad("bad kernel entry"))?;
            records.push(KernelRecord {
                id: fields[0].to_string(),
                label,
                ratio,
                kernel: BlurKernel::new(side, entries)?,
            });
        }
        Ok(Self { side, records })
    }

    /// Keeps only the records whose ids satisfy `keep`, in table order.
    pub fn filtered(&self, keep: impl Fn(&KernelRecord) -> bool) -> Self {
        Self {
            side: self.side,
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }
}

/// Default location of the failure log next to a kernel CSV.
pub fn failures_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("kernels");
    csv.with_file_name(format!("{stem}.failures.csv"))
}

/// Estimates the kernel of every manifest entry (images resolved against
/// `root`) and writes them to `csv` in manifest order. Existing rows with
/// matching side and label are reused. Entries whose estimation fails are
/// listed in [`failures_path`] and left out of the table.
pub fn estimate_all_kernels(
    manifest: &DatasetManifest,
    root: &Path,
    cfg: &DeconvConfig,
    csv: &Path,
    progress: Option<&(dyn Fn(usize, usize) + Sync)>,
) -> Result<KernelRun> {
    cfg.validate()?;
    let side = cfg.kernel_side;
    let mut known: HashMap<String, KernelRecord> = HashMap::new();
    if csv.exists() {
        let table = KernelTable::load(csv)?;
        if table.side != side {
            return Err(Error::InvalidParameter(format!(
                "{} holds {}x{} kernels; requested {side}x{side}",
                csv.display(),
                table.side,
                table.side
            )));
        }
        for r in table.records {
            known.insert(r.id.clone(), r);
        }
    }
    let by_id: HashMap<&str, &ManifestEntry> = manifest.entries.iter().map(|e| (e.id.as_str(), e)).collect();
    known.retain(|id, r| by_id.get(id.as_str()).is_some_and(|e| e.label == r.label));
    let reused = known.len();

    let missing: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| !known.contains_key(&e.id)).collect();
    // rewrite what is kept, then append as chunks finish
    KernelTable {
        side,
        records: manifest
            .entries
            .iter()
            .filter_map(|e| known.get(&e.id).cloned())
            .collect(),
    }
    .save(csv)?;
    let mut file = fs::OpenOptions::new()
        .append(true)
        .open(csv)
        .map_err(|e| Error::io(csv, e))?;

    let mut failures = Vec::new();
    let mut computed = 0;
    for chunk in missing.chunks(CHUNK) {
        let results: Vec<(&ManifestEntry, Result<BlurKernel>)> = chunk
            .par_iter()
            .map(|e| {
                (
                    *e,
                    manifest.load_image(root, e).and_then(|img| estimate_kernel(&img, cfg)),
                )
            })
            .collect();
        let mut text = String::new();
        for (e, res) in results {
            match res {
                Ok(kernel) => {
                    text.push_str(&kernel_csv_row(&e.id, e.label.code(), e.ratio, &kernel));
                    text.push('\n');
                    known.insert(
                        e.id.clone(),
                        KernelRecord {
                            id: e.id.clone(),
                            label: e.label,
                            ratio: e.ratio,
                            kernel,
                        },
                    );
                    computed += 1;
                }
                Err(err) => failures.push(KernelFailure {
                    id: e.id.clone(),
                    error: err.to_string(),
                }),
            }
        }
        file.write_all(text.as_bytes()).map_err(|e| Error::io(csv, e))?;
        if let Some(p) = progress {
            p(reused + computed + failures.len(), manifest.entries.len());
        }
    }
    drop(file);

    let table = KernelTable {
        side,
        records: manifest.entries.iter().filter_map(|e| known.remove(&e.id)).collect(),
    };
    table.save(csv)?;
    let fpath = failures_path(csv);
    if failures.is_empty() {
        if fpath.exists() {
            fs::remove_file(&fpath).map_err(|e| Error::io(&fpath, e))?;
        }
    } else {
        let mut out = String::from("id,error\n");
        for f in &failures {
            out.push_str(&format!("{},{}\n", f.id, f.error.replace([',', '\n'], ";")));
        }
        io::write_string(&fpath, &out)?;
    }
    Ok(KernelRun {
        table,
        failures,
        reused,
        computed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: ClassLabel, ratio: Option<f64>, side: usize) -> KernelRecord {
        let entries: Vec<f64> = (0..side * side).map(|i| (i as f64 + 0.1) / 7.0).collect();
        KernelRecord {
            id: id.into(),
            label,
            ratio,
            kernel: BlurKernel::new(side, entries).unwrap().project().unwrap(),
        }
    }

    #[test]
    fn table_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.csv");
        let t = KernelTable {
            side: 3,
            records: vec![
                record("C/r25/p00001", ClassLabel::Cs, Some(0.25), 3),
                record("J/r25/p00001", ClassLabel::Jp2, Some(69.81234567), 3),
                record("R/s0/p00001", ClassLabel::Raw, None, 3),
            ],
        };
        t.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("id,label,ratio,k0,k1,"));
        assert!(text.contains("\nR/s0/p00001,R,,"));
        assert_eq!(KernelTable::load(&path).unwrap(), t);

        fs::write(&path, text.replace("k8", "x8")).unwrap();
        assert!(KernelTable::load(&path).is_err());
        assert_eq!(failures_path(&path), dir.path().join("k.failures.csv"));
    }
}
