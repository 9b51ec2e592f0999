//! Dataset construction, batch kernel estimation, evaluation, and the
//! experiment runner behind the command-line tool.

pub mod dataset;
pub mod eval;
pub mod experiment;
pub mod kernels;

pub use dataset::{
    build_dataset, holdout_split, DatasetConfig, DatasetManifest, ManifestEntry, RateCalibration, Split,
};
pub use eval::{evaluate, per_ratio_report, ConfusionTable, PairSeparation, RatioAccuracy};
pub use experiment::{
    kernel_size_sweep, run_experiment, run_from_manifest, ExperimentConfig, ExperimentPaths, ExperimentResults,
    SweepResult,
};
pub use kernels::{estimate_all_kernels, KernelTable};
