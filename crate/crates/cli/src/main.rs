mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "csmf", version, about = "Cascaded selective-mask fine-tuning for multi-objective retrieval")]
struct Cli {
    /// TOML run configuration. Defaults apply to anything it leaves out.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one key of the configuration, e.g. `pipeline.tau=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic exposure/click/conversion dataset.
    GenData {
        /// Output directory (default: paths.data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the configured mode and write checkpoints at every stage boundary.
    Train {
        /// csmf, mixed_single or separate_per_objective.
        #[arg(long)]
        mode: Option<String>,
        /// Continue from a stage-boundary checkpoint.
        #[arg(long, value_name = "CKPT")]
        resume: Option<PathBuf>,
    },
    /// Recall and nDCG of a finished checkpoint on the test split.
    Eval {
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        /// Serving weights k_d,k_o,k_r (default: eval.weights).
        #[arg(long)]
        weights: Option<String>,
    },
    /// Write weighted user vectors and item vectors.
    Export {
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        weights: Option<String>,
        /// Output directory (default: <paths.run>/vectors).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-k items for one user.
    Retrieve {
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        /// Read exported vectors from this directory instead of encoding.
        #[arg(long, value_name = "DIR", conflicts_with = "weights")]
        vectors: Option<PathBuf>,
        #[arg(long)]
        user_id: u32,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        weights: Option<String>,
    },
    /// Metrics over a grid of serving weights (no retraining) or of tau (retrains).
    Sweep {
        #[arg(long, value_name = "CKPT")]
        checkpoint: Option<PathBuf>,
        /// Comma-separated k_d values.
        #[arg(long, default_value = "1")]
        kd: String,
        #[arg(long, default_value = "1.8")]
        ko: String,
        #[arg(long, default_value = "1.2")]
        kr: String,
        /// Comma-separated tau values; retrains once per value.
        #[arg(long, conflicts_with = "checkpoint")]
        tau: Option<String>,
    },
    /// Print the resolved configuration with every default spelled out.
    PrintConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_config_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<ConfigError>().is_some() || matches!(c.downcast_ref::<csmf::CsmfError>(), Some(csmf::CsmfError::Config(_)))
    })
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let env_seed = std::env::var("CSMF_SEED").ok();
    let cfg = RunConfig::load(cli.config.as_deref(), env_seed.as_deref(), &cli.set)?;
    match cli.command {
        Command::GenData { out } => commands::gen_data(&cfg, out),
        Command::Train { mode, resume } => commands::train(cfg, mode.as_deref(), resume),
        Command::Eval { checkpoint, weights } => commands::eval(&cfg, checkpoint, weights.as_deref()),
        Command::Export { checkpoint, weights, out } => commands::export(&cfg, checkpoint, weights.as_deref(), out),
        Command::Retrieve { checkpoint, vectors, user_id, k, weights } => {
            commands::retrieve(&cfg, checkpoint, vectors, user_id, k, weights.as_deref())
        }
        Command::Sweep { checkpoint, kd, ko, kr, tau } => commands::sweep(&cfg, checkpoint, [&kd, &ko, &kr], tau.as_deref()),
        Command::PrintConfig => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}
