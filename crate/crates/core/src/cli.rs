//! Command implementations behind the `sdql` binary.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use serde_json::json;

use crate::error::{Result, SdqlError};
use crate::io::{save_trainer, trajectories_csv, value_grid, write_text, BuiltEnv, Checkpoint, RunConfig};
use crate::staged_mdp::StagedEnv;
use crate::trainer::{evaluate, evaluation_rng, EvalStats, Trainer};
use crate::with_env;

/// Exit status for a failed command.
pub fn exit_code(err: &SdqlError) -> i32 {
    match err {
        SdqlError::Numeric(_) => 3,
        SdqlError::InvalidConfig(_) | SdqlError::Format(_) | SdqlError::VersionMismatch { .. } | SdqlError::Io(_) => 2,
        _ => 1,
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed_override: Option<u64>,
    /// Stop after this many episodes in total, checkpointing first.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub episodes_done: u64,
    pub finished: bool,
    pub eval: Option<EvalStats>,
}

pub const PROGRESS_LOG: &str = "progress.jsonl";
pub const LATEST_CHECKPOINT: &str = "latest.sdql";
pub const FINAL_CHECKPOINT: &str = "final.sdql";
pub const NUMERIC_FAILURE_CHECKPOINT: &str = "numeric_failure.sdql";

pub fn phase_checkpoint_name(phase: usize) -> String {
    format!("phase_{phase}.sdql")
}

struct ProgressLog(BufWriter<File>);

impl ProgressLog {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        Ok(Self(BufWriter::new(file)))
    }

    fn record(&mut self, value: serde_json::Value) -> Result<()> {
        writeln!(self.0, "{value}")?;
        self.0.flush()?;
        Ok(())
    }
}

fn resolve_train_config(args: &TrainArgs) -> Result<(RunConfig, Option<Checkpoint>)> {
    let checkpoint = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut config = match (&args.config, &checkpoint) {
        (Some(path), Some(ck)) => {
            let config = RunConfig::load(path)?;
            let mut stored = ck.config.clone();
            stored.output_dir.clone_from(&config.output_dir);
            if stored != config {
                return Err(SdqlError::InvalidConfig(format!(
                    "{} differs from the configuration stored in the checkpoint",
                    path.display()
                )));
            }
            ck.config.clone()
        }
        (Some(path), None) => RunConfig::load(path)?,
        (None, Some(ck)) => ck.config.clone(),
        (None, None) => return Err(SdqlError::InvalidConfig("train needs --config or --resume".into())),
    };
    if let Some(seed) = args.seed_override {
        if checkpoint.is_some() {
            return Err(SdqlError::InvalidConfig("--seed-override cannot be combined with --resume".into()));
        }
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.output_dir = out.to_string_lossy().into_owned();
    }
    Ok((config, checkpoint))
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let (config, checkpoint) = resolve_train_config(args)?;
    let env = config.validate()?;
    let out = PathBuf::from(&config.output_dir);
    std::fs::create_dir_all(&out)?;
    write_text(&out.join("config.toml"), &config.to_toml()?)?;
    with_env!(env, e => {
        let trainer = match checkpoint {
            Some(mut ck) => {
                ck.config.output_dir.clone_from(&config.output_dir);
                info!("resuming from episode {} (phase {})", ck.progress.episodes_done, ck.progress.phase);
                ck.into_trainer(e)?
            }
            None => Trainer::new(e, config.trainer_config())?,
        };
        drive_training(&config, trainer, &out, args.resume.is_some(), args.stop_after)
    })
}

fn drive_training<E: StagedEnv>(
    config: &RunConfig,
    mut trainer: Trainer<E>,
    out: &Path,
    append: bool,
    stop_after: Option<u64>,
) -> Result<TrainSummary> {
    let mut log = ProgressLog::open(&out.join(PROGRESS_LOG), append)?;
    let eval_every = config.trainer.eval_every as u64;
    if !append {
        log.record(json!({
            "event": "start",
            "environment": config.environment.name(),
            "n_stages": config.stages.n_stages,
            "seed": config.seed,
        }))?;
    }
    let mut phase_announced = 0;
    loop {
        if stop_after.is_some_and(|n| trainer.progress().episodes_done >= n) {
            break;
        }
        let phase = trainer.progress().phase;
        if phase != 0 && phase != phase_announced && trainer.progress().episode == 0 {
            log.record(json!({ "event": "phase_start", "phase": phase }))?;
            info!("phase {phase}: starting episodes in band {phase}");
            phase_announced = phase;
        }
        let report = match trainer.run_episode() {
            Ok(Some(r)) => r,
            Ok(None) => break,
            Err(err @ SdqlError::Numeric(_)) => {
                let path = out.join(NUMERIC_FAILURE_CHECKPOINT);
                save_trainer(&path, config, &trainer)?;
                log.record(json!({
                    "event": "numeric_failure",
                    "message": err.to_string(),
                    "checkpoint": path,
                }))?;
                warn!("numeric failure, state saved to {}", path.display());
                return Err(err);
            }
            Err(err) => return Err(err),
        };
        let progress = trainer.progress();
        log.record(json!({
            "event": "episode",
            "phase": report.phase,
            "episode": report.episode,
            "steps": report.steps,
            "success": report.success,
            "mean_loss": report.mean_loss,
            "env_steps": progress.env_steps,
            "eval": report.eval,
        }))?;
        debug!(
            "phase {} episode {}: {} steps, success {}",
            report.phase, report.episode, report.steps, report.success
        );
        if let Some(stats) = &report.eval {
            info!(
                "phase {} episode {}: eval success {:.2}, mean steps {:.1}",
                report.phase, report.episode, stats.success_rate, stats.mean_steps
            );
        }
        if report.phase_finished {
            let path = out.join(phase_checkpoint_name(report.phase));
            save_trainer(&path, config, &trainer)?;
            log.record(json!({ "event": "phase_end", "phase": report.phase, "checkpoint": path }))?;
        }
        if progress.episodes_done.is_multiple_of(eval_every) {
            save_trainer(&out.join(LATEST_CHECKPOINT), config, &trainer)?;
        }
    }

    let finished = trainer.is_done();
    let (path, eval) = if finished {
        let stats = trainer.evaluate(config.trainer.eval_episodes)?;
        (out.join(FINAL_CHECKPOINT), Some(stats))
    } else {
        (out.join(LATEST_CHECKPOINT), None)
    };
    save_trainer(&path, config, &trainer)?;
    let diagnostics = trainer.diagnostics();
    if diagnostics.truncation_violations > 0 {
        warn!("{} truncated targets differed from their reward", diagnostics.truncation_violations);
    }
    log.record(json!({
        "event": if finished { "finished" } else { "stopped" },
        "episodes_done": trainer.progress().episodes_done,
        "env_steps": trainer.progress().env_steps,
        "diagnostics": diagnostics,
        "eval": eval,
        "checkpoint": path,
    }))?;
    Ok(TrainSummary {
        output_dir: out.to_path_buf(),
        final_checkpoint: path,
        episodes_done: trainer.progress().episodes_done,
        finished,
        eval,
    })
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub episodes: usize,
    /// Trajectory CSV destination.
    pub out: Option<PathBuf>,
    /// Seed of the evaluation stream; defaults to the run seed.
    pub seed_override: Option<u64>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalStats> {
    if args.episodes == 0 {
        return Err(SdqlError::InvalidConfig("--episodes must be at least 1".into()));
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    let env = ck.config.validate()?;
    let policy = ck.policy();
    let mut rng = evaluation_rng(args.seed_override.unwrap_or(ck.config.seed));
    let (stats, trajectories) = with_env!(&env, e => {
        let (stats, trajectories) = evaluate(&policy, e, args.episodes, &mut rng)?;
        if let Some(out) = &args.out {
            write_text(out, &trajectories_csv(e, &trajectories))?;
        }
        (stats, trajectories.len())
    });
    debug!("evaluated {trajectories} episodes");
    Ok(stats)
}

#[derive(Clone, Debug)]
pub struct ExportArgs {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub grid: Option<usize>,
    pub theta: Option<f64>,
}

pub const DEFAULT_ANGLE_GRID: usize = 100;
pub const DEFAULT_ARENA_GRID: usize = 50;

/// Writes the merged value matrix and returns its `(rows, cols)`.
pub fn cmd_export_values(args: &ExportArgs) -> Result<(usize, usize)> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let env = ck.config.validate()?;
    let (resolution, theta) = match (&env, args.grid, args.theta) {
        (BuiltEnv::Gridworld(_), None, None) => (1, 0.0),
        (BuiltEnv::Gridworld(_), _, _) => {
            return Err(SdqlError::InvalidConfig(
                "gridworld exports every cell; --grid and --theta do not apply".into(),
            ))
        }
        (BuiltEnv::Manipulator(_), _, Some(_)) => {
            return Err(SdqlError::InvalidConfig("--theta only applies to the cargo slice".into()))
        }
        (BuiltEnv::Manipulator(_), g, None) => (g.unwrap_or(DEFAULT_ANGLE_GRID), 0.0),
        (BuiltEnv::Cargo(_), g, t) => (g.unwrap_or(DEFAULT_ARENA_GRID), t.unwrap_or(0.0)),
    };
    if !theta.is_finite() {
        return Err(SdqlError::InvalidConfig("--theta must be finite".into()));
    }
    let grid = value_grid(&ck.policy(), &env, resolution, theta)?;
    write_text(&args.out, &grid.to_csv())?;
    Ok((grid.row_centers.len(), grid.col_centers.len()))
}

pub fn cmd_validate_config(path: &Path) -> Result<RunConfig> {
    let config = RunConfig::load(path)?;
    config.validate()?;
    Ok(config)
}
