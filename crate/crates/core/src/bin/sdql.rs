use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sdql::cli::{self, EvalArgs, ExportArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "sdql", version, about = "Stacked deep Q learning for staged control tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a stack of per-stage modules, last stage first.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory; overrides the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
        /// Stop after this many episodes in total.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Greedy evaluation of a checkpointed policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Per-step trajectory CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Write the merged value function on a grid as CSV.
    ExportValues {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cells per axis (manipulator and cargo).
        #[arg(long)]
        grid: Option<usize>,
        /// Fixed heading of the cargo slice.
        #[arg(long, allow_negative_numbers = true)]
        theta: Option<f64>,
    },
    /// Check a configuration file without training.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(command: Command) -> sdql::Result<()> {
    match command {
        Command::Train {
            config,
            resume,
            out,
            seed_override,
            stop_after,
        } => {
            let summary = cli::cmd_train(&TrainArgs {
                config,
                resume,
                out,
                seed_override,
                stop_after,
            })?;
            let line = serde_json::json!({
                "finished": summary.finished,
                "episodes_done": summary.episodes_done,
                "checkpoint": summary.final_checkpoint,
                "eval": summary.eval,
            });
            println!("{line}");
        }
        Command::Eval {
            checkpoint,
            episodes,
            out,
            seed_override,
        } => {
            let stats = cli::cmd_eval(&EvalArgs {
                checkpoint,
                episodes,
                out,
                seed_override,
            })?;
            println!("{}", serde_json::to_string(&stats).expect("stats serialize"));
        }
        Command::ExportValues {
            checkpoint,
            out,
            grid,
            theta,
        } => {
            let (rows, cols) = cli::cmd_export_values(&ExportArgs {
                checkpoint,
                out: out.clone(),
                grid,
                theta,
            })?;
            println!("wrote {rows}x{cols} value matrix to {}", out.display());
        }
        Command::ValidateConfig { config } => {
            let c = cli::cmd_validate_config(&config)?;
            println!(
                "{}: ok ({}, {} stages, modules {})",
                config.display(),
                c.environment.name(),
                c.stages.n_stages,
                c.modules.iter().map(|m| m.kind_name()).collect::<Vec<_>>().join("/")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SDQL_LOG_LEVEL", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
