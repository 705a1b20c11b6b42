use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use signfold::gallery::{explain_image, parse_target, stem_for};
use signfold::site::build_site;
use signfold::{Overrides, Pipeline};
use signfold_core::balance::{undersample, BalancePolicy};
use signfold_core::report::{fmt6, FoldReport, Phase};
use signfold_core::DatasetManifest;
use signfold_nn::trainer::{load_checkpoint, CHECKPOINT_FILE};

/// Folder-per-class image classification experiments with k-fold
/// cross-validation and Grad-CAM explanations.
///
/// SIGNFOLD_OUTPUT_DIR overrides the run directory and SIGNFOLD_DEVICE
/// (cpu, cuda, cuda:N) the compute device.
#[derive(Parser)]
#[command(name = "signfold", version)]
struct Cli {
    /// Log filter, e.g. `info` or `signfold_nn=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment config (TOML).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Scan the dataset root into a manifest.
    Prepare {
        #[command(flatten)]
        config: ConfigArg,
        /// Write a synthetic dataset of CLASSES x PER_CLASS blob images first.
        #[arg(long, num_args = 2, value_names = ["CLASSES", "PER_CLASS"])]
        synthetic: Option<Vec<usize>>,
    },
    /// Cap classes at the configured size, or cap a manifest file directly.
    Balance {
        #[arg(long, short, required_unless_present = "input")]
        config: Option<PathBuf>,
        #[arg(long, requires_all = ["output", "cap", "seed"])]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        cap: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stratified holdout and k-fold assignment.
    Split {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train folds (all by default).
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// One-based fold number; repeatable.
        #[arg(long)]
        fold: Vec<usize>,
        /// Skip folds whose checkpoint already matches the config.
        #[arg(long)]
        resume: bool,
    },
    /// Score fold checkpoints and write fold reports.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        fold: Vec<usize>,
        #[arg(long, value_enum, default_value_t = PhaseArg::Test)]
        phase: PhaseArg,
    },
    /// Grad-CAM: a gallery over test images per fold, or one image with --checkpoint.
    Explain {
        #[arg(long, short, required_unless_present = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        fold: Vec<usize>,
        /// Checkpoint descriptor or fold directory.
        #[arg(long, requires_all = ["image", "out"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        /// Feature layer; defaults to the checkpoint's.
        #[arg(long)]
        layer: Option<String>,
        /// `auto`, a class name or a class index.
        #[arg(long, default_value = "auto")]
        target: String,
        #[arg(long, default_value_t = 0.4)]
        opacity: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render tables and figures from a run directory.
    Report {
        #[arg(long, required_unless_present = "config")]
        run_dir: Option<PathBuf>,
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Site directory; defaults to `<run-dir>/site`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV with study,dataset,test_accuracy columns.
        #[arg(long)]
        baselines: Option<PathBuf>,
    },
    /// Every stage in order, skipping those already done for this config.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, num_args = 2, value_names = ["CLASSES", "PER_CLASS"])]
        synthetic: Option<Vec<usize>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    Validation,
    Test,
    Both,
}

impl PhaseArg {
    fn phases(self) -> Vec<Phase> {
        match self {
            PhaseArg::Validation => vec![Phase::Validation],
            PhaseArg::Test => vec![Phase::Test],
            PhaseArg::Both => vec![Phase::Validation, Phase::Test],
        }
    }
}

fn synthetic(v: Option<Vec<usize>>) -> Option<(usize, usize)> {
    v.map(|v| (v[0], v[1]))
}

fn open(config: &Path) -> anyhow::Result<Pipeline> {
    Ok(Pipeline::open(config, &Overrides::from_env())?)
}

fn print_reports(reports: &[FoldReport]) {
    println!("| Phase | Fold | Precision | Recall | F1-Score | Accuracy |");
    for r in reports {
        println!(
            "| {} | Fold {} | {} | {} | {} | {} |",
            r.phase,
            r.fold + 1,
            fmt6(r.precision),
            fmt6(r.recall),
            fmt6(r.f1),
            fmt6(r.accuracy)
        );
    }
}

fn execute(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Prepare { config, synthetic: s } => {
            let m = open(&config.config)?.prepare(synthetic(s))?;
            println!("{} samples in {} classes", m.len(), m.classes.len());
        }
        Command::Balance {
            config,
            input,
            output,
            cap,
            seed,
        } => match (input, config) {
            (Some(input), _) => {
                let (output, cap, seed) = (output.unwrap(), cap.unwrap(), seed.unwrap());
                let m = DatasetManifest::load(&input)?;
                let out = undersample(&m, &BalancePolicy::new(cap, seed)?);
                out.save(&output)?;
                println!("{} -> {} samples", m.len(), out.len());
            }
            (None, Some(config)) => {
                let m = open(&config)?.balance()?;
                println!("{} samples after balancing", m.len());
            }
            (None, None) => bail!("give --config or --input"),
        },
        Command::Split { config } => {
            let m = open(&config.config)?.split()?;
            println!("{} samples annotated", m.len());
        }
        Command::Train { config, fold, resume } => {
            for t in open(&config.config)?.train(&fold, resume)? {
                println!(
                    "fold {}: {} epochs, best epoch {}, stop: {:?}",
                    t.fold + 1,
                    t.logs.len(),
                    t.best_epoch,
                    t.stop_reason
                );
            }
        }
        Command::Evaluate { config, fold, phase } => {
            print_reports(&open(&config.config)?.evaluate(&fold, &phase.phases())?);
        }
        Command::Explain {
            config,
            fold,
            checkpoint,
            image,
            layer,
            target,
            opacity,
            out,
        } => match checkpoint {
            Some(checkpoint) => {
                let (image, out) = (image.unwrap(), out.unwrap());
                let descriptor = if checkpoint.is_dir() {
                    checkpoint.join(CHECKPOINT_FILE)
                } else {
                    checkpoint
                };
                let device = signfold_nn::device(Overrides::from_env().device.as_deref().unwrap_or("cpu"))?;
                let (model, prep, desc) = load_checkpoint(&descriptor, &device)
                    .with_context(|| format!("loading {}", descriptor.display()))?;
                let layer = layer.unwrap_or_else(|| desc.feature_layer.clone());
                let name = image.display().to_string();
                let stem = image.file_name().map(|n| stem_for(&n.to_string_lossy())).unwrap_or_default();
                let rec = explain_image(
                    &model,
                    &prep,
                    &desc,
                    &descriptor,
                    &image,
                    &name,
                    None,
                    &layer,
                    parse_target(&target, &desc.classes)?,
                    opacity,
                    &out,
                    &stem,
                )?;
                println!("class {} ({}), overlay {}", rec.target_class, rec.target_label, out.join(&rec.overlay).display());
            }
            None => {
                let Some(config) = config else {
                    bail!("give --config or --checkpoint");
                };
                let records = open(&config)?.explain(&fold)?;
                println!("{} overlays written", records.len());
            }
        },
        Command::Report {
            run_dir,
            config,
            out,
            baselines,
        } => {
            let summary = match (run_dir, config) {
                (Some(run_dir), _) => {
                    let out = out.unwrap_or_else(|| run_dir.join("site"));
                    build_site(&run_dir, &out, baselines.as_deref())?
                }
                (None, Some(config)) => {
                    let p = open(&config)?;
                    match out {
                        Some(out) => build_site(p.run_dir().root(), &out, baselines.as_deref())?,
                        None => p.report()?,
                    }
                }
                (None, None) => bail!("give --run-dir or --config"),
            };
            println!("{}", summary.index.display());
        }
        Command::Run { config, synthetic: s } => {
            let summary = open(&config.config)?.run(synthetic(s))?;
            println!("{}", std::fs::read_to_string(&summary.comparison)?);
            println!("site: {}", summary.index.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
