//! `itid`: simulate data, train both stages, evaluate and check gradients.

mod commands;
mod dataset;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use itid_core::config::Ablation;
use itid_core::gradsuite::Suite;

/// Bad arguments or inputs that cannot be used as given.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "itid", version, about = "Instrument-tissue interaction detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[allow(clippy::enum_variant_names)]
enum AblateArg {
    NoScf,
    NoSca,
    NoTg,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModuleArg {
    All,
    Ops,
    Scf,
    Sca,
    Tg,
    Loss,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frozen first stage; required for stage 2.
        #[arg(long)]
        stage1_ckpt: Option<PathBuf>,
        #[arg(long, value_enum)]
        ablate: Option<AblateArg>,
        /// Reference frames per snippet (at most what the dataset holds).
        #[arg(long)]
        r: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Score the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        stage1_ckpt: Option<PathBuf>,
        #[arg(long)]
        stage2_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Score an annotation-format file instead of running the models.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Print one JSON record per class instead of the table.
        #[arg(long)]
        json_lines: bool,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value = "all")]
        module: ModuleArg,
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { config, out, count, force } => commands::simulate(config.as_deref(), &out, count, force),
        Command::Train {
            stage,
            config,
            data,
            out,
            stage1_ckpt,
            ablate,
            r,
            force,
        } => commands::train(commands::TrainArgs {
            stage,
            config: config.as_deref(),
            data: &data,
            out: &out,
            stage1_ckpt: stage1_ckpt.as_deref(),
            ablate: ablate.map(|a| match a {
                AblateArg::NoScf => Ablation::NoScf,
                AblateArg::NoSca => Ablation::NoSca,
                AblateArg::NoTg => Ablation::NoTg,
            }),
            r,
            force,
        }),
        Command::Eval {
            data,
            stage1_ckpt,
            stage2_ckpt,
            out,
            config,
            predictions,
            json_lines,
            force,
        } => commands::eval(commands::EvalArgs {
            config: config.as_deref(),
            data: &data,
            out: &out,
            stage1_ckpt: stage1_ckpt.as_deref(),
            stage2_ckpt: stage2_ckpt.as_deref(),
            predictions: predictions.as_deref(),
            json_lines,
            force,
        }),
        Command::Gradcheck { module, corrupt } => {
            let suites = match module {
                ModuleArg::All => Suite::ALL.to_vec(),
                ModuleArg::Ops => vec![Suite::Ops],
                ModuleArg::Scf => vec![Suite::Scf],
                ModuleArg::Sca => vec![Suite::Sca],
                ModuleArg::Tg => vec![Suite::Tg],
                ModuleArg::Loss => vec![Suite::Loss],
            };
            commands::gradcheck(&suites, corrupt)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(ce) = cause.downcast_ref::<itid_core::Error>() {
            return if ce.is_numerical() {
                EXIT_NUMERICAL
            } else if ce.is_io() {
                EXIT_IO
            } else {
                EXIT_USAGE
            };
        }
        if cause.is::<std::io::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
