//! End-to-end runs: dataset, kernels, the three learners plus the
//! statistical baseline, and the result files.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{build_dataset, rate_tag, DatasetConfig, DatasetManifest, RateCalibration, Split};
use super::eval::{
    class_separation, confusion_for, per_ratio_report, pixel_cnn_input, predict_records, run_chu_baseline,
    split_records, train_kernel_cnn, train_kernel_svm, ConfusionTable, PairSeparation, RatioAccuracy,
};
use super::kernels::{estimate_all_kernels, KernelTable};
use crate::chu::{ChuConfig, DetectorThresholds};
use crate::error::{Error, Result};
use crate::image::{ClassLabel, RandomSeed};
use crate::io;
use crate::kernel::DeconvConfig;
use crate::learn::{cnn_predict, cnn_train, CnnMode, CnnModel, LearnedModel, ModelFile, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelCnnConfig {
    pub trainer: TrainerConfig,
    /// Train on every `learn_stride`-th learning image.
    pub learn_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub deconv: DeconvConfig,
    pub svm_c: f64,
    pub kernel_cnn: TrainerConfig,
    /// `None` skips the pixel-input CNN.
    pub pixel_cnn: Option<PixelCnnConfig>,
    pub chu: ChuConfig,
    /// Sampling rate whose CS and matched JP2 kernels enter the class
    /// separation check.
    pub separation_rate: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::with_seed(RandomSeed::default())
    }
}

impl ExperimentConfig {
    /// Desk-scale defaults with every seeded stage derived from `seed`.
    pub fn with_seed(seed: RandomSeed) -> Self {
        let mut pixel = TrainerConfig::for_mode(CnnMode::Pixel, seed);
        pixel.epochs = 10;
        Self {
            dataset: DatasetConfig::default(),
            deconv: DeconvConfig::default(),
            svm_c: 1.0,
            kernel_cnn: TrainerConfig::for_mode(CnnMode::Kernel, seed),
            pixel_cnn: Some(PixelCnnConfig {
                trainer: pixel,
                learn_stride: 2,
            }),
            chu: ChuConfig::default(),
            separation_rate: 0.25,
        }
        .reseeded(seed)
    }

    /// Replaces every stage seed with one derived from `seed`.
    pub fn reseeded(mut self, seed: RandomSeed) -> Self {
        self.dataset.seed = seed;
        self.kernel_cnn.seed = seed.derive(300);
        if let Some(p) = &mut self.pixel_cnn {
            p.trainer.seed = seed.derive(301);
        }
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_string(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerResult {
    pub learner: String,
    pub confusion: ConfusionTable,
    pub overall_accuracy: f64,
    /// C, J, R detection rates; `None` for a class absent from the test set.
    pub class_accuracy: [Option<f64>; 3],
    pub per_ratio: Option<Vec<RatioAccuracy>>,
}

impl LearnerResult {
    fn new(learner: &str, confusion: ConfusionTable, per_ratio: Option<Vec<RatioAccuracy>>) -> Self {
        Self {
            learner: learner.to_string(),
            confusion,
            overall_accuracy: confusion.overall_accuracy(),
            class_accuracy: ClassLabel::ALL.map(|c| confusion.class_accuracy(c)),
            per_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub seed: RandomSeed,
    pub kernel_side: usize,
    pub images: usize,
    pub learn_images: usize,
    pub test_images: usize,
    pub calibrations: Vec<RateCalibration>,
    /// Ids whose kernel estimation failed.
    pub kernel_failures: Vec<String>,
    /// Mean centre entry of the estimated kernels, C, J, R.
    pub mean_kernel_center: [f64; 3],
    pub separation: Vec<PairSeparation>,
    pub chu_thresholds: DetectorThresholds,
    pub learners: Vec<LearnerResult>,
}

impl ExperimentResults {
    pub fn learner(&self, name: &str) -> Option<&LearnerResult> {
        self.learners.iter().find(|l| l.learner == name)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_string(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// File layout of one experiment directory.
#[derive(Debug, Clone)]
pub struct ExperimentPaths {
    pub root: PathBuf,
}

impl ExperimentPaths {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn manifest(&self) -> PathBuf {
        self.dataset().join("manifest.json")
    }
    pub fn kernels(&self, side: usize) -> PathBuf {
        self.root.join(format!("kernels_a{side}.csv"))
    }
    pub fn model(&self, learner: &str) -> PathBuf {
        self.root.join("models").join(format!("{learner}.json"))
    }
    pub fn confusion(&self, learner: &str) -> PathBuf {
        self.root.join(format!("confusion_{learner}.csv"))
    }
    pub fn results(&self) -> PathBuf {
        self.root.join("results.json")
    }
}

/// Builds the dataset from `corpus` and runs every stage into `out`.
pub fn run_experiment(corpus: &Path, out: &Path, cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    let paths = ExperimentPaths::new(out);
    cfg.save(&out.join("config.json"))?;
    let manifest = build_dataset(corpus, &paths.dataset(), &cfg.dataset)?;
    run_from_manifest(&manifest, out, cfg)
}

/// Every stage after dataset generation, for a dataset stored under
/// `out/dataset`.
pub fn run_from_manifest(manifest: &DatasetManifest, out: &Path, cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    let paths = ExperimentPaths::new(out);
    let root = paths.dataset();
    let side = cfg.deconv.kernel_side;
    let run = estimate_all_kernels(manifest, &root, &cfg.deconv, &paths.kernels(side), None)?;
    let table = run.table;
    let (learn, test) = split_records(manifest, &table);

    let mut learners = Vec::new();
    let svm = LearnedModel::Svm(train_kernel_svm(&learn, cfg.svm_c)?);
    let cnn = LearnedModel::Cnn(train_kernel_cnn(&learn, side, cfg.kernel_cnn.clone())?);
    for (name, model) in [("svm", svm), ("cnn_kernel", cnn)] {
        let predictions = predict_records(&model, &test)?;
        let confusion = confusion_for(manifest, &predictions)?;
        let per_ratio = per_ratio_report(manifest, &predictions)?;
        ModelFile::new(Some(side), model).save(&paths.model(name))?;
        learners.push(LearnerResult::new(name, confusion, Some(per_ratio)));
    }

    if let Some(pixel) = &cfg.pixel_cnn {
        let model = train_pixel_cnn(manifest, &root, pixel)?;
        let predictions = predict_pixels(&model, manifest, &root)?;
        let confusion = confusion_for(manifest, &predictions)?;
        let per_ratio = per_ratio_report(manifest, &predictions)?;
        ModelFile::new(None, LearnedModel::Cnn(model)).save(&paths.model("cnn_pixel"))?;
        learners.push(LearnerResult::new("cnn_pixel", confusion, Some(per_ratio)));
    }

    let chu = run_chu_baseline(manifest, &root, &cfg.chu)?;
    let chu_confusion = confusion_for(manifest, &chu.predictions)?;
    learners.push(LearnerResult::new(
        "chu",
        chu_confusion,
        Some(per_ratio_report(manifest, &chu.predictions)?),
    ));

    for l in &learners {
        l.confusion.save_csv(&paths.confusion(&l.learner))?;
    }
    write_per_ratio_dat(&out.join("per_ratio.dat"), &learners)?;

    let results = ExperimentResults {
        seed: manifest.seed,
        kernel_side: side,
        images: manifest.entries.len(),
        learn_images: manifest.entries_in(Split::Learn).count(),
        test_images: manifest.entries_in(Split::Test).count(),
        calibrations: manifest.calibrations.clone(),
        kernel_failures: run.failures.iter().map(|f| f.id.clone()).collect(),
        mean_kernel_center: mean_centers(&table),
        separation: separation_at(manifest, &table, cfg.separation_rate)?,
        chu_thresholds: chu.thresholds,
        learners,
    };
    results.save(&paths.results())?;
    Ok(results)
}

fn mean_centers(table: &KernelTable) -> [f64; 3] {
    ClassLabel::ALL.map(|c| {
        let centers: Vec<f64> = table
            .records
            .iter()
            .filter(|r| r.label == c)
            .map(|r| r.kernel.center())
            .collect();
        if centers.is_empty() {
            0.0
        } else {
            centers.iter().sum::<f64>() / centers.len() as f64
        }
    })
}

/// Separation check on CS kernels at `rate`, JP2 kernels at the matched
/// ratio, and the RAW source set.
pub fn separation_at(manifest: &DatasetManifest, table: &KernelTable, rate: f64) -> Result<Vec<PairSeparation>> {
    let tag = rate_tag(rate);
    let keep = [format!("C/{tag}"), format!("J/{tag}"), "R/s0".to_string()];
    let subclass: std::collections::HashMap<&str, &str> = manifest
        .entries
        .iter()
        .map(|e| (e.id.as_str(), e.subclass.as_str()))
        .collect();
    let records: Vec<_> = table
        .records
        .iter()
        .filter(|r| subclass.get(r.id.as_str()).is_some_and(|s| keep.iter().any(|k| k == s)))
        .collect();
    class_separation(&records)
}

/// Pixel-input CNN on a strided subset of the learning split.
pub fn train_pixel_cnn(manifest: &DatasetManifest, root: &Path, cfg: &PixelCnnConfig) -> Result<CnnModel> {
    if cfg.learn_stride == 0 {
        return Err(Error::InvalidParameter("learn stride must be positive".into()));
    }
    let chosen: Vec<_> = manifest.entries_in(Split::Learn).step_by(cfg.learn_stride).collect();
    let inputs: Vec<Vec<f64>> = chosen
        .par_iter()
        .map(|e| Ok(pixel_cnn_input(&manifest.load_image(root, e)?)))
        .collect::<Result<_>>()?;
    let labels: Vec<ClassLabel> = chosen.iter().map(|e| e.label).collect();
    let side = manifest.patch_side;
    cnn_train(&inputs, &labels, CnnMode::Pixel, side, side, cfg.trainer.clone())
}

/// Pixel-CNN predictions for the whole test split.
pub fn predict_pixels(model: &CnnModel, manifest: &DatasetManifest, root: &Path) -> Result<Vec<(String, ClassLabel)>> {
    let test: Vec<_> = manifest.entries_in(Split::Test).collect();
    test.par_iter()
        .map(|e| {
            Ok((
                e.id.clone(),
                cnn_predict(model, &pixel_cnn_input(&manifest.load_image(root, e)?))?.label,
            ))
        })
        .collect()
}

/// Gnuplot data: one block per learner and class (C then J), columns
/// `ratio accuracy correct total`, blocks separated by two blank lines.
fn write_per_ratio_dat(path: &Path, learners: &[LearnerResult]) -> Result<()> {
    let mut out = String::new();
    for l in learners {
        let Some(rows) = &l.per_ratio else { continue };
        for class in [ClassLabel::Cs, ClassLabel::Jp2] {
            out.push_str(&format!(
                "# {} {}\n# ratio accuracy correct total\n",
                l.learner,
                class.code()
            ));
            for r in rows.iter().filter(|r| r.label == class) {
                out.push_str(&format!("{} {:.4} {} {}\n", r.ratio, r.accuracy, r.correct, r.total));
            }
            out.push_str("\n\n");
        }
    }
    io::write_string(path, &out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub kernel_side: usize,
    pub svm: f64,
    pub cnn_kernel: f64,
    pub kernel_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub best_svm: usize,
    pub best_cnn_kernel: usize,
}

/// Overall test accuracy of both kernel learners for each kernel side.
/// Kernel CSVs go to `out/kernels_a{side}.csv` and are reused if present.
/// The first side reaching the maximum wins ties.
pub fn kernel_size_sweep(
    manifest: &DatasetManifest,
    out: &Path,
    sides: &[usize],
    cfg: &ExperimentConfig,
) -> Result<SweepResult> {
    if sides.is_empty() {
        return Err(Error::InvalidParameter("no kernel sides to sweep".into()));
    }
    let paths = ExperimentPaths::new(out);
    let mut points = Vec::new();
    for &side in sides {
        let deconv = DeconvConfig {
            kernel_side: side,
            ..cfg.deconv.clone()
        };
        let run = estimate_all_kernels(manifest, &paths.dataset(), &deconv, &paths.kernels(side), None)?;
        let (learn, test) = split_records(manifest, &run.table);
        let svm = LearnedModel::Svm(train_kernel_svm(&learn, cfg.svm_c)?);
        let cnn = LearnedModel::Cnn(train_kernel_cnn(&learn, side, cfg.kernel_cnn.clone())?);
        let acc = |m: &LearnedModel| -> Result<f64> {
            Ok(confusion_for(manifest, &predict_records(m, &test)?)?.overall_accuracy())
        };
        points.push(SweepPoint {
            kernel_side: side,
            svm: acc(&svm)?,
            cnn_kernel: acc(&cnn)?,
            kernel_failures: run.failures.len(),
        });
    }
    let best = |f: fn(&SweepPoint) -> f64| {
        points
            .iter()
            .fold(None::<&SweepPoint>, |b, p| match b {
                Some(b) if f(b) >= f(p) => Some(b),
                _ => Some(p),
            })
            .map_or(0, |p| p.kernel_side)
    };
    let result = SweepResult {
        best_svm: best(|p| p.svm),
        best_cnn_kernel: best(|p| p.cnn_kernel),
        points,
    };
    let mut dat = String::from("# kernel_side svm cnn_kernel\n");
    for p in &result.points {
        dat.push_str(&format!("{} {:.4} {:.4}\n", p.kernel_side, p.svm, p.cnn_kernel));
    }
    io::write_string(&out.join("sweep.dat"), &dat)?;
    io::write_string(
        &out.join("sweep.json"),
        &(serde_json::to_string_pretty(&result)? + "\n"),
    )?;
    Ok(result)
}
