use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use invariance_cli::commands::{self, exit_code, invalid, Experiment};
use invariance_cli::config::RunConfig;

/// Detect misclassified and novel inputs of a black-box image classifier from
/// the stability of its scores under image transforms.
#[derive(Parser)]
#[command(name = "invariance", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags override the matching keys of the config file.
#[derive(Args)]
struct Overrides {
    /// JSON run config; defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (`output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Toy task seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    classes: Option<usize>,
    /// Comma-separated transform names, identity first.
    #[arg(long, global = true, value_delimiter = ',')]
    transforms: Option<Vec<String>>,
    #[arg(long, global = true)]
    k_prime: Option<usize>,
    /// Scored variants per image.
    #[arg(long, global = true)]
    copies: Option<usize>,
    /// Enables default test-time augmentation seeded with this value.
    #[arg(long, global = true)]
    augment_seed: Option<u64>,
    #[arg(long, global = true)]
    detector_seed: Option<u64>,
    #[arg(long, global = true)]
    runtime_budget_secs: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy task, train its classifier, write images and splits.
    Toy,
    /// Expand a PNG directory into per-transform trees.
    Transform {
        #[arg(long)]
        input: PathBuf,
    },
    /// Score a transform tree with a toy classifier.
    Score {
        #[arg(long)]
        classifier: PathBuf,
        /// `manifest.csv` of a transform tree.
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train the Identity-only and all-transform detectors.
    TrainDetector {
        #[arg(long)]
        scores: PathBuf,
        /// Directory holding the split id files.
        #[arg(long)]
        splits: PathBuf,
    },
    /// Evaluate baselines and trained detectors on the eval split.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        splits: PathBuf,
        /// Detector model file; the file stem names its rows.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
    },
    /// Run a novelty experiment on the toy task.
    Novelty {
        #[arg(long, value_enum)]
        experiment: Experiment,
    },
    /// Run the full toy pipeline and every acceptance check.
    Reproduce,
}

fn resolve(o: &Overrides) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(o.config.as_deref()).map_err(|e| invalid(format!("{e:#}")))?;
    if let Some(v) = &o.out {
        cfg.output_dir = Some(v.clone());
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = o.classes {
        cfg.classes = v;
    }
    if let Some(v) = &o.transforms {
        cfg.transform_set = commands::parse_transforms(v)?;
    }
    if let Some(v) = o.k_prime {
        cfg.k_prime = Some(v);
    }
    if let Some(v) = o.copies {
        cfg.copies = v;
    }
    if let Some(v) = o.augment_seed {
        let mut aug = cfg.augmentation.unwrap_or_default();
        aug.rng_seed = v;
        cfg.augmentation = Some(aug);
    }
    if let Some(v) = o.detector_seed {
        cfg.detector.rng_seed = v;
    }
    if let Some(v) = o.runtime_budget_secs {
        cfg.runtime_budget_secs = v;
    }
    cfg.validate().map_err(|e| invalid(format!("{e:#}")))?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli.overrides)?;
    match cli.command {
        Command::Toy => commands::toy(&cfg),
        Command::Transform { input } => commands::transform(&cfg, &input),
        Command::Score { classifier, manifest } => commands::score(&cfg, &classifier, &manifest),
        Command::TrainDetector { scores, splits } => commands::train_detector(&cfg, &scores, &splits),
        Command::Eval { scores, splits, models } => commands::eval(&cfg, &scores, &splits, &models),
        Command::Novelty { experiment } => commands::novelty(&cfg, experiment),
        Command::Reproduce => commands::reproduce(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not failures.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
