//! `appl`: meta-train, fine-tune and evaluate prototype-based few-shot models.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use appl_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "appl",
    version,
    about = "Cross-domain few-shot learning with learned prototypes"
)]
struct Cli {
    /// Worker threads for task evaluation (default: logical processors).
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML). Missing keys take their defaults.
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Args)]
struct CheckpointArg {
    /// Checkpoint to evaluate [default: <run dir>/checkpoint.json].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the evaluation episodes of the configured benchmark as JSON lines.
    GenBench {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Meta-train the encoder and PCN on the source domain.
    MetaTrain {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Fine-tune on each evaluation task and report accuracy.
    AdaptEval {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        /// Ablation variant to apply to the configured fine-tuning settings.
        #[arg(long, default_value = "full")]
        variant: String,
        /// Evaluate the episodes in this file instead of sampling them.
        #[arg(long)]
        episodes: Option<PathBuf>,
    },
    /// Evaluate every ablation variant on the same tasks.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        /// Comma-separated variant ids [default: all].
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Evaluate a grid of values for one fine-tuning hyper-parameter.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        /// alpha0, epsilon, lambda_coh or lambda_dis.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
    },
    /// Finite-difference check of every loss term on seeded toy episodes.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-run one evaluation task from the seed logged in metrics.csv.
    Replay {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        checkpoint: CheckpointArg,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "full")]
        variant: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Dimension(_) | Error::Checkpoint(_) => 2,
        Error::Numeric(_) => 3,
        Error::Io { .. } | Error::Parse(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::GenBench { config } => commands::gen_bench(&config.config),
        Command::MetaTrain { config } => commands::meta_train(&config.config),
        Command::AdaptEval {
            config,
            checkpoint,
            variant,
            episodes,
        } => commands::adapt_eval(
            &config.config,
            checkpoint.checkpoint.as_deref(),
            &variant,
            episodes.as_deref(),
        ),
        Command::Ablate {
            config,
            checkpoint,
            variants,
        } => commands::ablate(&config.config, checkpoint.checkpoint.as_deref(), &variants),
        Command::Sweep {
            config,
            checkpoint,
            param,
            grid,
        } => commands::sweep(&config.config, checkpoint.checkpoint.as_deref(), &param, &grid),
        Command::Gradcheck { episodes, seed } => commands::gradcheck(episodes, seed),
        Command::Replay {
            config,
            checkpoint,
            seed,
            variant,
        } => commands::replay(&config.config, checkpoint.checkpoint.as_deref(), seed, &variant),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
