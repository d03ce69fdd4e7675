mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pointhop::{Error, Result};

use crate::config::RunConfig;

/// Point-cloud classification with successive subspace learning.
#[derive(Debug, Parser)]
#[command(name = "pointhop", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root containing `train/` and `test/`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Model container path.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Output file; stdout when omitted for CSV reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the feature tree, ranking and classifier; write a model.
    Fit,
    /// Accuracy and confusion matrix of a model on a dataset split.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Predict classes of individual `.xyz` files.
    Predict {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Feature ranking of a model as CSV.
    Rank,
    /// Retrain per energy threshold and report train/validation accuracy.
    SweepThreshold,
    /// Train/validation accuracy versus number of ranked features.
    SweepFeatures {
        /// `ce`, `energy` or `both`.
        #[arg(long, default_value = "both")]
        mode: String,
    },
    /// Test accuracy at several point densities.
    BenchDensity,
    /// Correlation of the hop-0 Saab coefficients.
    ReportCorrelation {
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Write a synthetic four-shape dataset.
    Synth {
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 50)]
        test_per_class: usize,
        #[arg(long, default_value_t = 1024)]
        points: usize,
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
    },
}

fn build_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = &common.data {
        cfg.data = Some(p.clone());
    }
    if let Some(p) = &common.model {
        cfg.model = Some(p.clone());
    }
    if let Some(p) = &common.out {
        cfg.out = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(Error::InvalidInput("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidState(format!("thread pool: {e}")))?;
    }
    let cfg = build_config(&cli.common)?;
    match cli.command {
        Command::Fit => commands::fit(&cfg),
        Command::Eval { split } => commands::eval(&cfg, split.parse()?),
        Command::Predict { files } => commands::predict(&cfg, &files),
        Command::Rank => commands::rank(&cfg),
        Command::SweepThreshold => commands::sweep_threshold(&cfg),
        Command::SweepFeatures { mode } => commands::sweep_features(&cfg, &mode),
        Command::BenchDensity => commands::bench_density(&cfg),
        Command::ReportCorrelation { split } => commands::report_correlation(&cfg, split.parse()?),
        Command::Synth {
            per_class,
            test_per_class,
            points,
            noise,
        } => commands::synth(&cfg, per_class, test_per_class, points, noise),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PH2_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprint!("ERROR:Usage: {e}");
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR:{}: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
