//! Command-line front end for the saliency benchmark pipeline.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use saliency_core::bench::{Metric, Mode, Run, RunConfig, Variant};
use saliency_core::estimators::EstimatorKind;
use saliency_core::Error;

#[derive(Parser)]
#[command(name = "saliency-bench", version, about = "Train a toy classifier and benchmark saliency estimators on it")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML config file with dotted keys; defaults apply to anything unset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated estimator keys, e.g. `backprop,intgrad`.
    #[arg(long, global = true, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    /// Comma-separated post-processing variants: original, absolute.
    #[arg(long, global = true, value_delimiter = ',')]
    variants: Option<Vec<String>>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the classifier on the generated dataset.
    Train,
    /// Compute heatmaps for every estimator and variant.
    Attribute,
    /// Compute evaluation curves.
    Eval {
        #[arg(value_enum)]
        metric: EvalMetric,
    },
    /// Build summary tables and plots from the curves.
    Report,
    /// Run every stage, reusing up-to-date outputs.
    Run,
    /// Print the effective configuration as dotted keys.
    PrintConfig,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum EvalMetric {
    Fidelity,
    Roc,
    Dsc,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_STAGE: u8 = 3;

fn load_config(common: &Common) -> saliency_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(list) = &common.estimators {
        cfg.attribute.estimators = list.iter().map(|s| s.trim().parse::<EstimatorKind>()).collect::<Result<_, _>>()?;
    }
    if let Some(list) = &common.variants {
        cfg.attribute.variants = list.iter().map(|s| Variant::parse(s.trim())).collect::<Result<_, _>>()?;
    }
    if common.jobs == Some(0) {
        return Err(Error::Validation("--jobs must be at least 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: &Command, cfg: RunConfig) -> saliency_core::Result<()> {
    let mut run = Run::open(cfg)?;
    match command {
        Command::GenData => run.gen_data(Mode::Force),
        Command::Train => run.train(Mode::Force),
        Command::Attribute => run.attribute(Mode::Force),
        Command::Eval { metric } => {
            let m = match metric {
                EvalMetric::Fidelity => Metric::Fidelity,
                EvalMetric::Roc => Metric::Roc,
                EvalMetric::Dsc => Metric::Dsc,
            };
            run.eval(&[m], Mode::Force)
        }
        Command::Report => run.report(Mode::Force),
        Command::Run => {
            let manifest = run.run_all()?;
            for table in ["fidelity", "auc", "dsc"] {
                let path = run.path(format!("report/{table}.txt"));
                if let Ok(text) = std::fs::read_to_string(&path) {
                    println!("{text}");
                }
            }
            println!("run complete: {} artifacts, config hash {}", manifest.artifact_paths().len(), manifest.config_hash);
            Ok(())
        }
        Command::PrintConfig => unreachable!("handled before opening a run"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Command::PrintConfig = cli.command {
        let mut stdout = std::io::stdout().lock();
        for line in cfg.to_flat_lines() {
            if writeln!(stdout, "{line}").is_err() {
                break;
            }
        }
        return ExitCode::SUCCESS;
    }
    if let Some(n) = cli.common.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match execute(&cli.command, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(EXIT_STAGE)
        }
    }
}
