//! `moe`: data generation, training, evaluation, benchmarking and ablation
//! for the request-level mixture-of-experts engine.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! runtime failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::UsageError;

#[derive(Debug, Parser)]
#[command(name = "moe", version, about = "Request-level mixture-of-experts engine")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides one configuration key, e.g. `--set router.k=1`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Primary output path of the command.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Prints the default configuration and exits.
    #[arg(long)]
    print_default_config: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generates a synthetic dataset (JSON lines).
    GenData,
    /// Trains a model; `--out` is the checkpoint path.
    Train {
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Per-epoch metrics CSV.
        #[arg(long, value_name = "PATH")]
        metrics: Option<PathBuf>,
        /// Writes the zero-initialized model without training.
        #[arg(long)]
        untrained: bool,
    },
    /// Reports test AUC overall and per nation; `--out` writes it as CSV.
    Eval {
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Measures pipeline throughput; `--out` writes the report as CSV.
    Bench {
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Trains and benchmarks every fusion × routing cell; `--out` is the
    /// output directory.
    Ablate {
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Writes the fused test-set representations as CSV.
    DumpEmbeddings {
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.common.print_default_config {
        print!("{}", commands::default_config_text());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(UsageError("no subcommand given (try --help)".into()).into());
    };
    let common = &cli.common;
    let config = commands::load_config(common.config.as_deref(), &common.overrides, common.seed)?;
    let out = common.out.clone();
    match command {
        Command::GenData => commands::gen_data(&config, out),
        Command::Train {
            data,
            metrics,
            untrained,
        } => commands::train(&config, data, out, metrics, untrained),
        Command::Eval { model, data } => commands::eval(&config, model, data, out),
        Command::Bench { model, data } => commands::bench(&config, model, data, out),
        Command::Ablate { data } => commands::ablate(&config, data, out),
        Command::DumpEmbeddings { model, data } => commands::dump_embeddings(&config, model, data, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
