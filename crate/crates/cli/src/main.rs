use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dri_ite::commands::{
    cmd_ablation, cmd_augment, cmd_eval, cmd_gen_data, cmd_importance, cmd_train,
    cmd_weights_report, CommandContext,
};
use dri_ite::config::{ExperimentConfig, Profile, ResolvedConfig};
use dri_ite::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Paper,
    Desk,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Profile {
        match p {
            ProfileArg::Paper => Profile::Paper,
            ProfileArg::Desk => Profile::Desk,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "dri-ite",
    about = "Disentangled-representation treatment effect estimation experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the replication base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (falls back to the config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Concurrent replications (falls back to DRI_ITE_WORKERS, then to the
    /// number of CPUs).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Hyper-parameter profile providing defaults the config can override.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: ProfileArg,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (CSV + manifest).
    GenData,
    /// Append artificial contrasts to a CSV dataset.
    Augment,
    /// Train all replications; write checkpoints, histories, and a summary.
    Train,
    /// Evaluate a checkpoint: metrics JSON + per-feature tidy CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Replication index the checkpoint was trained as.
        #[arg(long, default_value_t = 0)]
        replication: usize,
    },
    /// Permutation feature importance for a checkpoint.
    Importance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        replication: usize,
    },
    /// Weight-contribution vectors and group means for a checkpoint.
    WeightsReport {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        replication: usize,
    },
    /// Loss-configuration x irrelevant-dimension sweep.
    Ablation,
}

fn resolve_workers(flag: Option<usize>) -> usize {
    if let Some(w) = flag {
        return w.max(1);
    }
    if let Ok(raw) = std::env::var("DRI_ITE_WORKERS") {
        if let Ok(w) = raw.parse::<usize>() {
            return w.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

fn build_context(cli: &Cli) -> CliResult<CommandContext> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let file = ExperimentConfig::load(config_path)?;
    let out_dir = cli
        .out
        .clone()
        .or_else(|| file.output_dir.clone())
        .ok_or_else(|| {
            CliError::Config("an output directory is required (--out or output_dir)".into())
        })?;
    let resolved = ResolvedConfig::from_file(&file, cli.profile.into(), cli.seed);
    Ok(CommandContext {
        resolved,
        out_dir,
        workers: resolve_workers(cli.workers),
    })
}

fn run(cli: &Cli) -> CliResult<()> {
    let ctx = build_context(cli)?;
    match &cli.command {
        Command::GenData => cmd_gen_data(&ctx),
        Command::Augment => cmd_augment(&ctx),
        Command::Train => cmd_train(&ctx),
        Command::Eval {
            checkpoint,
            replication,
        } => cmd_eval(&ctx, checkpoint, *replication),
        Command::Importance {
            checkpoint,
            replication,
        } => cmd_importance(&ctx, checkpoint, *replication),
        Command::WeightsReport {
            checkpoint,
            replication,
        } => cmd_weights_report(&ctx, checkpoint, *replication),
        Command::Ablation => cmd_ablation(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
