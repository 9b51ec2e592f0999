//! End-to-end harness run at toy scale: 64x64 patches, N_r = 4, two rates.

use std::fs;
use std::path::Path;

use csforensics::harness::dataset::Split;
use csforensics::harness::kernels::KernelTable;
use csforensics::harness::{
    build_dataset, estimate_all_kernels, kernel_size_sweep, run_experiment, ExperimentConfig, ExperimentPaths,
};
use csforensics::kernel::DeconvConfig;
use csforensics::{synth, ClassLabel, RandomSeed};

fn toy_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::with_seed(RandomSeed(seed));
    cfg.dataset.n_r = 4;
    cfg.dataset.rates = vec![0.25, 0.5];
    cfg.dataset.patch_side = 64;
    cfg.deconv = DeconvConfig {
        outer_iterations: 4,
        ..DeconvConfig::with_side(5)
    };
    cfg.kernel_cnn.epochs = 3;
    if let Some(p) = &mut cfg.pixel_cnn {
        p.trainer.epochs = 1;
    }
    cfg
}

fn files_under(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn toy_experiment_is_balanced_deterministic_and_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synth::write_corpus(&corpus, 4, 128, RandomSeed(3)).unwrap();
    let cfg = toy_config(21);

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let res_a = run_experiment(&corpus, &a, &cfg).unwrap();
    let res_b = run_experiment(&corpus, &b, &cfg).unwrap();
    assert_eq!(res_a, res_b);
    let listing = files_under(&a);
    assert_eq!(listing, files_under(&b));
    for f in &listing {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
    for f in [
        "results.json",
        "kernels_a5.csv",
        "models/svm.json",
        "models/cnn_kernel.json",
        "models/cnn_pixel.json",
    ] {
        assert!(listing.iter().any(|l| l == f), "missing {f}");
    }

    let paths = ExperimentPaths::new(&a);
    let manifest = csforensics::harness::DatasetManifest::load(&paths.manifest()).unwrap();
    for l in ClassLabel::ALL {
        assert_eq!(manifest.count(l), 8);
    }
    assert_eq!(manifest.entries_in(Split::Learn).count(), 18);
    assert_eq!(manifest.entries_in(Split::Test).count(), 6);
    let mut raw_patches: Vec<usize> = manifest
        .entries
        .iter()
        .filter(|e| e.label == ClassLabel::Raw)
        .map(|e| e.patch_id)
        .collect();
    raw_patches.sort();
    raw_patches.dedup();
    assert_eq!(raw_patches.len(), 8);
    manifest.verify(&paths.dataset()).unwrap();

    assert_eq!(res_a.images, 24);
    assert!(res_a.kernel_failures.is_empty());
    for l in &res_a.learners {
        assert_eq!(l.confusion.total(), 6);
        assert!((0.0..=100.0).contains(&l.overall_accuracy));
        assert_eq!(l.per_ratio.as_ref().unwrap().len(), 4);
    }

    // drop rows and resume: the file comes back identical
    let csv = paths.kernels(5);
    let full = fs::read_to_string(&csv).unwrap();
    let kept: Vec<&str> = full.lines().take(full.lines().count() - 3).collect();
    fs::write(&csv, kept.join("\n") + "\n").unwrap();
    let run = estimate_all_kernels(&manifest, &paths.dataset(), &cfg.deconv, &csv, None).unwrap();
    assert_eq!(run.computed, 3);
    assert_eq!(run.reused, 21);
    assert_eq!(fs::read_to_string(&csv).unwrap(), full);
    assert_eq!(KernelTable::load(&csv).unwrap(), run.table);

    let sweep = kernel_size_sweep(&manifest, &a, &[3, 5], &cfg).unwrap();
    assert_eq!(sweep.points.len(), 2);
    assert!(sweep
        .points
        .iter()
        .all(|p| (0.0..=100.0).contains(&p.svm) && (0.0..=100.0).contains(&p.cnn_kernel)));
    assert!([3, 5].contains(&sweep.best_svm));
    assert!(a.join("sweep.dat").exists());

    // tampering is caught
    let first = a.join("dataset").join(&manifest.entries[0].path);
    let mut bytes = fs::read(&first).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&first, bytes).unwrap();
    assert!(manifest.verify(&paths.dataset()).is_err());
}

#[test]
fn too_small_corpus_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synth::write_corpus(&corpus, 1, 128, RandomSeed(3)).unwrap();
    let cfg = toy_config(1);
    assert!(build_dataset(&corpus, &tmp.path().join("out"), &cfg.dataset).is_err());
}
