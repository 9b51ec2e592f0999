//! Confusion tables, learner training on kernel tables, per-ratio accuracy,
//! and the class-separation check on mean kernels.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetManifest, ManifestEntry, Split};
use super::kernels::{KernelRecord, KernelTable};
use crate::chu::{chu_statistics, classify_statistics, fit_thresholds, ChuConfig, ChuStatistics, DetectorThresholds};
use crate::error::{Error, Result};
use crate::image::{ClassLabel, GrayImage};
use crate::io;
use crate::learn::{
    cnn_predict, cnn_train, normalize_kernel, standardize, svm_train, CnnMode, CnnModel, LearnedModel,
    NormalizationStats, SvmModel, TrainerConfig,
};

/// Counts indexed `[predicted][truth]` in C, J, R order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTable {
    pub counts: [[u64; 3]; 3],
}

impl ConfusionTable {
    pub fn add(&mut self, predicted: ClassLabel, truth: ClassLabel) {
        self.counts[predicted.index()][truth.index()] += 1;
    }

    pub fn column_total(&self, truth: ClassLabel) -> u64 {
        (0..3).map(|p| self.counts[p][truth.index()]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Share of `truth` images predicted as `predicted`, in percent. `None`
    /// for an empty column.
    pub fn percent(&self, predicted: ClassLabel, truth: ClassLabel) -> Option<f64> {
        let n = self.column_total(truth);
        (n > 0).then(|| 100.0 * self.counts[predicted.index()][truth.index()] as f64 / n as f64)
    }

    pub fn class_accuracy(&self, class: ClassLabel) -> Option<f64> {
        self.percent(class, class)
    }

    pub fn overall_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..3).map(|i| self.counts[i][i]).sum();
        100.0 * trace as f64 / total as f64
    }

    /// Rows are predictions, columns ground truth; counts then percentages.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("predicted\\truth,C,J,R,C_pct,J_pct,R_pct\n");
        for p in ClassLabel::ALL {
            out.push_str(p.code());
            for t in ClassLabel::ALL {
                out.push_str(&format!(",{}", self.counts[p.index()][t.index()]));
            }
            for t in ClassLabel::ALL {
                out.push_str(&format!(",{:.2}", self.percent(p, t).unwrap_or(0.0)));
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        io::write_string(path, &self.to_csv())
    }
}

/// Builds the table from aligned prediction and truth sequences.
pub fn evaluate(predicted: &[ClassLabel], truth: &[ClassLabel]) -> Result<ConfusionTable> {
    if predicted.len() != truth.len() {
        return Err(Error::dim(predicted.len(), truth.len()));
    }
    let mut t = ConfusionTable::default();
    for (&p, &g) in predicted.iter().zip(truth) {
        t.add(p, g);
    }
    Ok(t)
}

/// SVM input for one kernel: the 8-bit normalized image scaled to [0, 1].
pub fn kernel_feature(record: &KernelRecord) -> Vec<f64> {
    normalize_kernel(&record.kernel).to_unit()
}

/// CNN input for one kernel: the 8-bit normalized image as grey levels.
pub fn kernel_cnn_input(record: &KernelRecord) -> Vec<f64> {
    normalize_kernel(&record.kernel)
        .pixels()
        .iter()
        .map(|&v| f64::from(v))
        .collect()
}

/// CNN input for one image: its grey levels in raster order.
pub fn pixel_cnn_input(img: &GrayImage) -> Vec<f64> {
    img.to_u8().into_iter().map(f64::from).collect()
}

/// Learning and test records of `table`, following the manifest's split.
pub fn split_records<'a>(
    manifest: &DatasetManifest,
    table: &'a KernelTable,
) -> (Vec<&'a KernelRecord>, Vec<&'a KernelRecord>) {
    let split: HashMap<&str, Split> = manifest.entries.iter().map(|e| (e.id.as_str(), e.split)).collect();
    let mut learn = Vec::new();
    let mut test = Vec::new();
    for r in &table.records {
        match split.get(r.id.as_str()) {
            Some(Split::Learn) => learn.push(r),
            Some(Split::Test) => test.push(r),
            None => {}
        }
    }
    (learn, test)
}

/// Linear SVM on standardized kernel features. The standardization
/// statistics come from `learn` only and are stored in the model.
pub fn train_kernel_svm(learn: &[&KernelRecord], c_reg: f64) -> Result<SvmModel> {
    let raw: Vec<Vec<f64>> = learn.iter().map(|r| kernel_feature(r)).collect();
    let stats = NormalizationStats::fit(&raw)?;
    let xs = raw.iter().map(|h| standardize(h, &stats)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<ClassLabel> = learn.iter().map(|r| r.label).collect();
    let mut model = svm_train(&xs, &labels, c_reg)?;
    model.stats = Some(stats);
    Ok(model)
}

pub fn train_kernel_cnn(learn: &[&KernelRecord], side: usize, trainer: TrainerConfig) -> Result<CnnModel> {
    let xs: Vec<Vec<f64>> = learn.iter().map(|r| kernel_cnn_input(r)).collect();
    let labels: Vec<ClassLabel> = learn.iter().map(|r| r.label).collect();
    cnn_train(&xs, &labels, CnnMode::Kernel, side, side, trainer)
}

/// Applies a kernel-feature model to one record.
pub fn predict_kernel(model: &LearnedModel, record: &KernelRecord) -> Result<ClassLabel> {
    match model {
        LearnedModel::Svm(m) => Ok(m.classify(&kernel_feature(record))?.label),
        LearnedModel::Cnn(m) => Ok(cnn_predict(m, &kernel_cnn_input(record))?.label),
    }
}

/// Predicted label for every test record, keyed by entry id.
pub fn predict_records(model: &LearnedModel, records: &[&KernelRecord]) -> Result<Vec<(String, ClassLabel)>> {
    records
        .par_iter()
        .map(|r| Ok((r.id.clone(), predict_kernel(model, r)?)))
        .collect()
}

/// Confusion table of id-keyed predictions against the manifest labels.
pub fn confusion_for(manifest: &DatasetManifest, predictions: &[(String, ClassLabel)]) -> Result<ConfusionTable> {
    let truth: HashMap<&str, ClassLabel> = manifest.entries.iter().map(|e| (e.id.as_str(), e.label)).collect();
    let mut table = ConfusionTable::default();
    for (id, p) in predictions {
        let t = truth
            .get(id.as_str())
            .ok_or_else(|| Error::Dataset(format!("prediction for unknown entry {id}")))?;
        table.add(*p, *t);
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioAccuracy {
    pub subclass: String,
    pub label: ClassLabel,
    pub ratio: f64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Detection accuracy of each CS and JP2 test sub-class. CS rows come first
/// in increasing sampling rate, then JP2 rows in decreasing compression
/// ratio.
pub fn per_ratio_report(
    manifest: &DatasetManifest,
    predictions: &[(String, ClassLabel)],
) -> Result<Vec<RatioAccuracy>> {
    let predicted: HashMap<&str, ClassLabel> = predictions.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    let mut groups: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in manifest.entries_in(Split::Test).filter(|e| e.label != ClassLabel::Raw) {
        groups.entry(e.subclass.as_str()).or_default().push(e);
    }
    let mut rows = Vec::new();
    for (sub, entries) in groups {
        // entries without a kernel have no prediction and are left out
        let scored: Vec<bool> = entries
            .iter()
            .filter_map(|e| predicted.get(e.id.as_str()).map(|p| *p == e.label))
            .collect();
        if scored.is_empty() {
            return Err(Error::Dataset(format!("no predictions for sub-class {sub}")));
        }
        let correct = scored.iter().filter(|&&c| c).count();
        rows.push(RatioAccuracy {
            subclass: sub.to_string(),
            label: entries[0].label,
            ratio: entries[0]
                .ratio
                .ok_or_else(|| Error::Dataset(format!("sub-class {sub} has no ratio")))?,
            correct,
            total: scored.len(),
            accuracy: 100.0 * correct as f64 / scored.len() as f64,
        });
    }
    let expected = 2 * manifest.rates.len();
    if rows.len() != expected {
        return Err(Error::Dataset(format!(
            "{} CS/JP2 test sub-classes; expected {expected}",
            rows.len()
        )));
    }
    rows.sort_by(|a, b| {
        a.label.index().cmp(&b.label.index()).then_with(|| match a.label {
            ClassLabel::Jp2 => b.ratio.total_cmp(&a.ratio),
            _ => a.ratio.total_cmp(&b.ratio),
        })
    });
    Ok(rows)
}

/// True if `values` never increases, except for at most one rise of at
/// most `slack`.
pub fn non_increasing_with_slack(values: &[f64], slack: f64) -> bool {
    let rises: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
    rises.is_empty() || (rises.len() == 1 && rises[0] <= slack)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSeparation {
    pub first: ClassLabel,
    pub second: ClassLabel,
    /// Euclidean distance between the two mean kernels.
    pub distance: f64,
    /// Root mean squared distance of each class's kernels to their mean.
    pub spread_first: f64,
    pub spread_second: f64,
    pub separated: bool,
}

/// Mean-kernel distance against within-class spread for every class pair.
/// A pair counts as separated when the distance exceeds both spreads.
pub fn class_separation(records: &[&KernelRecord]) -> Result<Vec<PairSeparation>> {
    let mut means: Vec<Vec<f64>> = Vec::new();
    let mut spreads = Vec::new();
    for class in ClassLabel::ALL {
        let members: Vec<&[f64]> = records
            .iter()
            .filter(|r| r.label == class)
            .map(|r| r.kernel.entries())
            .collect();
        if members.len() < 2 {
            return Err(Error::Dataset(format!(
                "class {} has {} kernels; need 2",
                class.code(),
                members.len()
            )));
        }
        let dim = members[0].len();
        let n = members.len() as f64;
        let mut mean = vec![0.0; dim];
        for m in &members {
            for (a, v) in mean.iter_mut().zip(*m) {
                *a += v / n;
            }
        }
        let ms: f64 = members.iter().map(|m| sq_dist(m, &mean)).sum::<f64>() / n;
        means.push(mean);
        spreads.push(ms.sqrt());
    }
    let pairs = [(0, 1), (0, 2), (1, 2)];
    Ok(pairs
        .iter()
        .map(|&(a, b)| {
            let distance = sq_dist(&means[a], &means[b]).sqrt();
            PairSeparation {
                first: ClassLabel::ALL[a],
                second: ClassLabel::ALL[b],
                distance,
                spread_first: spreads[a],
                spread_second: spreads[b],
                separated: distance > spreads[a] && distance > spreads[b],
            }
        })
        .collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChuOutcome {
    pub thresholds: DetectorThresholds,
    pub predictions: Vec<(String, ClassLabel)>,
    pub statistics: Vec<(String, ChuStatistics)>,
}

/// Fits the two detector thresholds on the learning split and classifies
/// the test split. Images whose statistics cannot be computed are an error.
pub fn run_chu_baseline(manifest: &DatasetManifest, root: &Path, cfg: &ChuConfig) -> Result<ChuOutcome> {
    let statistics: Vec<(String, ChuStatistics)> = manifest
        .entries
        .par_iter()
        .map(|e| Ok((e.id.clone(), chu_statistics(&manifest.load_image(root, e)?, cfg)?)))
        .collect::<Result<_>>()?;
    let (mut learn_stats, mut learn_labels) = (Vec::new(), Vec::new());
    for (e, (_, s)) in manifest.entries.iter().zip(&statistics) {
        if e.split == Split::Learn {
            learn_stats.push(*s);
            learn_labels.push(e.label);
        }
    }
    let thresholds = fit_thresholds(&learn_stats, &learn_labels, cfg)?;
    let predictions = manifest
        .entries
        .iter()
        .zip(&statistics)
        .filter(|(e, _)| e.split == Split::Test)
        .map(|(e, (_, s))| (e.id.clone(), classify_statistics(s, &thresholds)))
        .collect();
    Ok(ChuOutcome {
        thresholds,
        predictions,
        statistics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::RandomSeed;
    use crate::kernel::BlurKernel;
    use rand::Rng;

    #[test]
    fn perfect_predictions_give_identity() {
        let truth: Vec<ClassLabel> = (0..30).map(|i| ClassLabel::ALL[i % 3]).collect();
        let t = evaluate(&truth, &truth).unwrap();
        assert_eq!(t.counts, [[10, 0, 0], [0, 10, 0], [0, 0, 10]]);
        assert_eq!(t.overall_accuracy(), 100.0);
        assert!(evaluate(&truth[..3], &truth).is_err());
    }

    #[test]
    fn percentages_follow_columns() {
        let mut t = ConfusionTable::default();
        // ground truth C: 7 right, 2 called J, 1 called R
        for _ in 0..7 {
            t.add(ClassLabel::Cs, ClassLabel::Cs);
        }
        t.add(ClassLabel::Jp2, ClassLabel::Cs);
        t.add(ClassLabel::Jp2, ClassLabel::Cs);
        t.add(ClassLabel::Raw, ClassLabel::Cs);
        t.add(ClassLabel::Raw, ClassLabel::Raw);
        assert_eq!(t.column_total(ClassLabel::Cs), 10);
        let col: f64 = ClassLabel::ALL
            .iter()
            .map(|&p| t.percent(p, ClassLabel::Cs).unwrap())
            .sum();
        assert!((col - 100.0).abs() < 1e-12);
        assert_eq!(t.percent(ClassLabel::Jp2, ClassLabel::Cs), Some(20.0));
        assert_eq!(t.class_accuracy(ClassLabel::Jp2), None);
        assert!((t.overall_accuracy() - 800.0 / 11.0).abs() < 1e-12);
        let csv = t.to_csv();
        assert!(csv.lines().nth(2).unwrap().starts_with("J,2,0,0,20.00,"));
    }

    #[test]
    fn random_predictions_sit_near_chance() {
        // binomial oracle: n = 30000, p = 1/3, sd = 0.27 points
        let mut rng = RandomSeed(5).rng();
        let truth: Vec<ClassLabel> = (0..30_000).map(|i| ClassLabel::ALL[i % 3]).collect();
        let pred: Vec<ClassLabel> = truth.iter().map(|_| ClassLabel::ALL[rng.random_range(0..3)]).collect();
        let acc = evaluate(&pred, &truth).unwrap().overall_accuracy();
        assert!((acc - 100.0 / 3.0).abs() < 1.2, "{acc}");
    }

    #[test]
    fn trend_slack_allows_one_small_rise() {
        assert!(non_increasing_with_slack(&[90.0, 80.0, 80.0, 60.0], 3.0));
        assert!(non_increasing_with_slack(&[90.0, 80.0, 82.5, 60.0], 3.0));
        assert!(!non_increasing_with_slack(&[90.0, 80.0, 84.0, 60.0], 3.0));
        assert!(!non_increasing_with_slack(&[90.0, 91.0, 80.0, 81.0], 3.0));
    }

    #[test]
    fn separation_of_distinct_clusters() {
        let mut rng = RandomSeed(2).rng();
        let mut recs = Vec::new();
        for (c, class) in ClassLabel::ALL.into_iter().enumerate() {
            for i in 0..20 {
                let mut e = vec![0.1; 9];
                e[c] = 1.0;
                for v in &mut e {
                    *v += 0.01 * rng.random::<f64>();
                }
                recs.push(KernelRecord {
                    id: format!("{c}/{i}"),
                    label: class,
                    ratio: None,
                    kernel: BlurKernel::new(3, e).unwrap(),
                });
            }
        }
        let refs: Vec<&KernelRecord> = recs.iter().collect();
        let seps = class_separation(&refs).unwrap();
        assert_eq!(seps.len(), 3);
        for s in &seps {
            // means differ by 0.9 in two coordinates
            assert!((s.distance - 0.9 * 2f64.sqrt()).abs() < 0.02);
            assert!(s.spread_first < 0.02 && s.separated);
        }
        assert!(class_separation(&refs[..20]).is_err());
    }
}
