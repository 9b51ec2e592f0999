use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use csforensics::chu::ChuConfig;
use csforensics::conventional::{calibrate_ratio, jp2_pipeline, raw_pipeline, Jp2Config};
use csforensics::cs::{cs_pipeline, CsConfig};
use csforensics::harness::eval::{
    confusion_for, per_ratio_report, predict_records, run_chu_baseline, split_records, train_kernel_cnn,
    train_kernel_svm,
};
use csforensics::harness::experiment::{predict_pixels, train_pixel_cnn, PixelCnnConfig};
use csforensics::harness::{
    build_dataset, estimate_all_kernels, kernel_size_sweep, run_experiment, DatasetManifest, ExperimentConfig,
    KernelTable,
};
use csforensics::io;
use csforensics::kernel::DeconvConfig;
use csforensics::learn::{CnnMode, LearnedModel, ModelFile, TrainerConfig};
use csforensics::{synth, ClassLabel, GrayImage, RandomSeed, Result};

#[derive(Parser)]
#[command(
    name = "csforensics",
    version,
    about = "Identify compressive-sensing imagers from blur-kernel fingerprints"
)]
struct Cli {
    /// Master seed; every randomized stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment configuration (JSON). Defaults to the desk-scale setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic scene corpus.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Dataset generation from a corpus.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Find the codec ratio whose mean PSNR matches CS at a sampling rate.
    Calibrate {
        /// Directory of images (PGM/BMP), all the same size.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        rate: f64,
    },
    /// Run one imaging pipeline on a single image.
    Simulate {
        #[arg(value_enum)]
        pipeline: Pipeline,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Sampling rate (cs) or compression ratio (jp2).
        #[arg(long)]
        param: Option<f64>,
    },
    /// Estimate the blur kernel of every dataset image.
    Kernels {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Kernel side; overrides the configuration.
        #[arg(long)]
        side: Option<usize>,
    },
    /// Train one learner on the learning split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        learner: Learner,
        /// Kernel CSV (kernel learners only).
        #[arg(long)]
        kernels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Confusion table of a trained model on the test split.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        kernels: Option<PathBuf>,
        /// Where to write the confusion CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-ratio CS and JP2 detection accuracy of a trained model.
    Report {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        kernels: Option<PathBuf>,
    },
    /// Accuracy against kernel side for both kernel learners.
    Sweep {
        /// Experiment directory holding `dataset/manifest.json`.
        #[arg(long)]
        experiment: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [3, 5, 7, 9, 11, 13])]
        sides: Vec<usize>,
    },
    /// Statistical baselines.
    Baseline {
        #[command(subcommand)]
        action: BaselineAction,
    },
    /// Dataset, kernels, every learner, and the result files in one go.
    Experiment {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum CorpusAction {
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 80)]
        count: usize,
        #[arg(long, default_value_t = 256)]
        side: usize,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Source patches per class and rate (`N_r`).
        #[arg(long)]
        n_r: Option<usize>,
        /// Sampling rates, comma separated.
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
    },
}

#[derive(Subcommand)]
enum BaselineAction {
    /// Wavelet-statistics detector; thresholds fitted on the learning split.
    Chu {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Pipeline {
    Cs,
    Jp2,
    Raw,
}

#[derive(Clone, Copy, ValueEnum)]
enum Learner {
    Svm,
    CnnKernel,
    CnnPixel,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    Ok(match cli.seed {
        Some(s) => cfg.reseeded(RandomSeed(s)),
        None => cfg,
    })
}

/// Dataset images live next to the manifest.
fn manifest_root(path: &Path) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Corpus {
            action: CorpusAction::Synth { out, count, side },
        } => {
            let files = synth::write_corpus(out, *count, *side, cfg.dataset.seed)?;
            println!("wrote {} scenes to {}", files.len(), out.display());
        }
        Command::Dataset {
            action:
                DatasetAction::Build {
                    corpus,
                    out,
                    n_r,
                    rates,
                },
        } => {
            let mut dcfg = cfg.dataset.clone();
            if let Some(n) = n_r {
                dcfg.n_r = *n;
            }
            if let Some(r) = rates {
                dcfg.rates = r.clone();
            }
            let m = build_dataset(corpus, out, &dcfg)?;
            for c in &m.calibrations {
                println!(
                    "rate {:.2}: matched ratio {:.4} (CS {:.2} dB, JP2 {:.2} dB)",
                    c.rate, c.calibration.ratio, c.calibration.cs_mean_psnr, c.calibration.jp2_mean_psnr
                );
            }
            for l in ClassLabel::ALL {
                println!("{}: {} images", l.code(), m.count(l));
            }
        }
        Command::Calibrate { images, rate } => {
            let files = csforensics::harness::dataset::list_corpus(images)?;
            let imgs = files
                .iter()
                .map(|p| io::read_image(p))
                .collect::<Result<Vec<GrayImage>>>()?;
            let cs = CsConfig {
                rate: *rate,
                seed: cfg.dataset.seed,
                ..cfg.dataset.cs.clone()
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&calibrate_ratio(&imgs, &cs, &cfg.dataset.jp2)?)?
            );
        }
        Command::Simulate {
            pipeline,
            input,
            output,
            param,
        } => {
            let img = io::read_image(input)?;
            let out = match pipeline {
                Pipeline::Cs => {
                    let cs = CsConfig {
                        rate: param.unwrap_or(cfg.dataset.cs.rate),
                        seed: cfg.dataset.seed,
                        ..cfg.dataset.cs.clone()
                    };
                    cs_pipeline(&img, &cs)?
                }
                Pipeline::Jp2 => {
                    let j = Jp2Config {
                        target_ratio: param.unwrap_or(cfg.dataset.jp2.target_ratio),
                        ..cfg.dataset.jp2.clone()
                    };
                    jp2_pipeline(&img, &j)?
                }
                Pipeline::Raw => raw_pipeline(&img),
            };
            io::write_pgm(output, &out)?;
        }
        Command::Kernels { manifest, out, side } => {
            let m = DatasetManifest::load(manifest)?;
            let deconv = DeconvConfig {
                kernel_side: side.unwrap_or(cfg.deconv.kernel_side),
                ..cfg.deconv.clone()
            };
            let progress = |done: usize, total: usize| eprint!("\r{done}/{total} kernels");
            let run = estimate_all_kernels(&m, &manifest_root(manifest), &deconv, out, Some(&progress))?;
            eprintln!();
            println!(
                "{} kernels ({} reused, {} computed, {} failed)",
                run.table.records.len(),
                run.reused,
                run.computed,
                run.failures.len()
            );
        }
        Command::Train {
            manifest,
            learner,
            kernels,
            out,
        } => {
            let m = DatasetManifest::load(manifest)?;
            let file = match learner {
                Learner::CnnPixel => {
                    let pixel = cfg.pixel_cnn.clone().unwrap_or(PixelCnnConfig {
                        trainer: TrainerConfig::for_mode(CnnMode::Pixel, cfg.dataset.seed.derive(301)),
                        learn_stride: 1,
                    });
                    ModelFile::new(
                        None,
                        LearnedModel::Cnn(train_pixel_cnn(&m, &manifest_root(manifest), &pixel)?),
                    )
                }
                Learner::Svm | Learner::CnnKernel => {
                    let table = KernelTable::load(require_kernels(kernels)?)?;
                    let (learn, _) = split_records(&m, &table);
                    let model = match learner {
                        Learner::Svm => LearnedModel::Svm(train_kernel_svm(&learn, cfg.svm_c)?),
                        _ => LearnedModel::Cnn(train_kernel_cnn(&learn, table.side, cfg.kernel_cnn.clone())?),
                    };
                    ModelFile::new(Some(table.side), model)
                }
            };
            file.save(out)?;
            println!("model written to {}", out.display());
        }
        Command::Evaluate {
            manifest,
            model,
            kernels,
            out,
        } => {
            let m = DatasetManifest::load(manifest)?;
            let predictions = predict(&m, manifest, model, kernels)?;
            let table = confusion_for(&m, &predictions)?;
            print!("{}", table.to_csv());
            println!("overall accuracy {:.2}%", table.overall_accuracy());
            if let Some(path) = out {
                table.save_csv(path)?;
            }
        }
        Command::Report {
            manifest,
            model,
            kernels,
        } => {
            let m = DatasetManifest::load(manifest)?;
            let predictions = predict(&m, manifest, model, kernels)?;
            for r in per_ratio_report(&m, &predictions)? {
                println!(
                    "{:<8} ratio {:>10.4}  {:>6.2}%  ({}/{})",
                    r.subclass, r.ratio, r.accuracy, r.correct, r.total
                );
            }
        }
        Command::Sweep { experiment, sides } => {
            let m = DatasetManifest::load(&experiment.join("dataset").join("manifest.json"))?;
            let res = kernel_size_sweep(&m, experiment, sides, &cfg)?;
            for p in &res.points {
                println!("a = {:>2}: svm {:.2}%  cnn {:.2}%", p.kernel_side, p.svm, p.cnn_kernel);
            }
            println!("best side: svm {}, cnn {}", res.best_svm, res.best_cnn_kernel);
        }
        Command::Baseline {
            action: BaselineAction::Chu { manifest, out },
        } => {
            let m = DatasetManifest::load(manifest)?;
            let chu_cfg: ChuConfig = cfg.chu;
            let res = run_chu_baseline(&m, &manifest_root(manifest), &chu_cfg)?;
            let table = confusion_for(&m, &res.predictions)?;
            println!(
                "thresholds tau1 = {:.5}, tau2 = {:.5}",
                res.thresholds.tau1, res.thresholds.tau2
            );
            print!("{}", table.to_csv());
            println!("overall accuracy {:.2}%", table.overall_accuracy());
            if let Some(path) = out {
                table.save_csv(path)?;
            }
        }
        Command::Experiment { corpus, out } => {
            let res = run_experiment(corpus, out, &cfg)?;
            for l in &res.learners {
                println!("{:<10} {:.2}%", l.learner, l.overall_accuracy);
            }
            println!("results written to {}", out.join("results.json").display());
        }
    }
    Ok(())
}

fn require_kernels(kernels: &Option<PathBuf>) -> Result<&Path> {
    kernels
        .as_deref()
        .ok_or_else(|| csforensics::Error::InvalidParameter("--kernels is required for kernel models".into()))
}

fn predict(
    m: &DatasetManifest,
    manifest: &Path,
    model: &Path,
    kernels: &Option<PathBuf>,
) -> Result<Vec<(String, ClassLabel)>> {
    let file = ModelFile::load(model)?;
    match (&file.model, file.kernel_side) {
        (LearnedModel::Cnn(cnn), None) => predict_pixels(cnn, m, &manifest_root(manifest)),
        (model, Some(side)) => {
            let table = KernelTable::load(require_kernels(kernels)?)?;
            if table.side != side {
                return Err(csforensics::Error::InvalidParameter(format!(
                    "model expects {side}x{side} kernels, file holds {}x{}",
                    table.side, table.side
                )));
            }
            let (_, test) = split_records(m, &table);
            predict_records(model, &test)
        }
        (LearnedModel::Svm(_), None) => Err(csforensics::Error::InvalidParameter(
            "SVM model without kernel side".into(),
        )),
    }
}
