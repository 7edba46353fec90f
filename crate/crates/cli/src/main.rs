mod commands;
mod config;
mod suite;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use covae::models::Method;
use covae::Error;

/// Conditional and GP prior VAEs with missing covariates.
#[derive(Parser)]
#[command(name = "covae", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Ours,
    Mean,
    Knn,
    Zero,
    Oracle,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ours => Method::Ours,
            MethodArg::Mean => Method::Mean,
            MethodArg::Knn => Method::Knn,
            MethodArg::Zero => Method::Zero,
            MethodArg::Oracle => Method::Oracle,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write generated (or re-masked) splits, manifest, truth and metadata.
    Generate(Common),
    /// Train a model and write the archive and step history.
    Train {
        #[command(flatten)]
        common: Common,
        /// Covariate handling; overrides `eval.method`.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Continue from the archive at `output.model`.
        #[arg(long)]
        resume: bool,
    },
    /// Score the test split with a trained archive.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Covariate handling; overrides `eval.method`.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Fill missing covariates of a split with the model's posterior.
    Impute {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Run the missing-rate × method × seed grid.
    Suite {
        #[command(flatten)]
        common: Common,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let Some(err) = e.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 1;
    };
    match err {
        Error::Config { .. } => 2,
        _ if err.is_numerical() => 4,
        Error::Manifest(_)
        | Error::Parse { .. }
        | Error::Io { .. }
        | Error::Csv(_)
        | Error::Json(_)
        | Error::SchemaMismatch(_)
        | Error::Rate(_)
        | Error::TooFewInstances(_)
        | Error::MissingGroundTruth(_)
        | Error::InvalidCategory { .. }
        | Error::DimensionMismatch(_) => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let load = |c: &Common| config::load(&c.config, c.seed, c.out.as_deref());
    match cli.command {
        Command::Generate(c) => commands::generate(&load(&c)?),
        Command::Train { common, method, resume } => {
            let cfg = load(&common)?;
            let m = method.map_or(cfg.eval.method, Method::from);
            commands::train(&cfg, m, resume)
        }
        Command::Evaluate { common, method } => {
            let cfg = load(&common)?;
            let m = method.map_or(cfg.eval.method, Method::from);
            commands::evaluate_cmd(&cfg, m)
        }
        Command::Impute { common, split } => {
            let cfg = load(&common)?;
            commands::impute_cmd(&cfg, split as usize).map(|_| ())
        }
        Command::Suite { common, jobs } => suite::suite(&load(&common)?, jobs),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
