use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqlError};
use crate::rl_modules::{ModuleConfig, QModule};
use crate::staged_mdp::{reset_in_band, SdqlRng, StageSpec, StagedEnv};

use super::buffer::ReplayBuffer;
use super::policy::{collect_step, evaluate, EvalStats, StackedPolicy};

/// Hyperparameters of the training loop itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerParams {
    /// Episodes started in each band.
    pub episodes_per_phase: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Samples a buffer must hold before its module learns from it.
    pub warmup_steps: usize,
    /// Environment steps between learning rounds.
    pub learn_every: usize,
    /// Training episodes between evaluations.
    pub eval_every: usize,
    pub eval_episodes: usize,
}

impl Default for TrainerParams {
    fn default() -> Self {
        Self {
            episodes_per_phase: 200,
            batch_size: 64,
            buffer_capacity: 100_000,
            warmup_steps: 1000,
            learn_every: 1,
            eval_every: 50,
            eval_episodes: 10,
        }
    }
}

impl TrainerParams {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("buffer_capacity", self.buffer_capacity),
            ("learn_every", self.learn_every),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes),
        ] {
            if v == 0 {
                return Err(format!("trainer.{name} must be positive"));
            }
        }
        if self.batch_size > self.buffer_capacity {
            return Err(format!(
                "trainer.batch_size = {} exceeds trainer.buffer_capacity = {}",
                self.batch_size, self.buffer_capacity
            ));
        }
        Ok(())
    }
}

/// Everything the trainer needs besides the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub params: TrainerParams,
    pub seed: u64,
    pub stages: StageSpec,
    pub modules: Vec<ModuleConfig>,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate().map_err(SdqlError::InvalidConfig)?;
        self.stages.validate()?;
        if self.modules.len() != self.stages.n_stages {
            return Err(SdqlError::InvalidConfig(format!(
                "{} modules configured for {} stages",
                self.modules.len(),
                self.stages.n_stages
            )));
        }
        Ok(())
    }
}

/// Initialization seeds of the stage modules.
pub fn module_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = SdqlRng::seed_from_u64(seed);
    rng.set_stream(2);
    (0..n).map(|_| rng.random()).collect()
}

/// Random stream driving training: resets, exploration, dynamics, sampling.
pub fn training_rng(seed: u64) -> SdqlRng {
    SdqlRng::seed_from_u64(seed)
}

/// Fresh stream used by every evaluation, so results depend on the policy only.
pub fn evaluation_rng(seed: u64) -> SdqlRng {
    let mut rng = SdqlRng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Position of the training loop between episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Band whose episodes are running; 0 once training is complete.
    pub phase: usize,
    /// Episodes already finished in the current phase.
    pub episode: usize,
    pub episodes_done: u64,
    pub env_steps: u64,
    pub learn_calls: Vec<u64>,
}

/// Runtime checks accumulated over training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Sampled terminal or stage-transition tuples whose target was checked.
    pub truncation_checks: u64,
    /// Such tuples whose target differed from the stored reward.
    pub truncation_violations: u64,
    pub stage_transitions: u64,
    pub terminal_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub phase: usize,
    /// 1-based episode index within the phase.
    pub episode: usize,
    pub steps: usize,
    pub success: bool,
    /// Mean critic loss of each stage's learn calls during the episode.
    pub mean_loss: Vec<Option<f64>>,
    pub phase_finished: bool,
    pub eval: Option<EvalStats>,
}

/// Backward stage-phased training, resumable between episodes.
pub struct Trainer<E: StagedEnv> {
    env: E,
    config: TrainerConfig,
    policy: StackedPolicy,
    buffers: Vec<ReplayBuffer>,
    rng: SdqlRng,
    progress: Progress,
    diagnostics: Diagnostics,
}

impl<E: StagedEnv> Trainer<E> {
    pub fn new(env: E, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let n = config.stages.n_stages;
        let policy = StackedPolicy::build(&env, &config.stages, &config.modules, &module_seeds(config.seed, n))?;
        let buffers = (1..=n)
            .map(|i| ReplayBuffer::new(i, config.params.buffer_capacity))
            .collect::<Result<_>>()?;
        let progress = Progress {
            phase: if config.params.episodes_per_phase == 0 { 0 } else { n },
            episode: 0,
            episodes_done: 0,
            env_steps: 0,
            learn_calls: vec![0; n],
        };
        Ok(Self {
            rng: training_rng(config.seed),
            env,
            config,
            policy,
            buffers,
            progress,
            diagnostics: Diagnostics::default(),
        })
    }

    /// Reassembles a trainer from checkpointed state.
    pub fn from_parts(
        env: E,
        config: TrainerConfig,
        policy: StackedPolicy,
        buffers: Vec<ReplayBuffer>,
        rng: SdqlRng,
        progress: Progress,
        diagnostics: Diagnostics,
    ) -> Result<Self> {
        config.validate()?;
        let n = config.stages.n_stages;
        if env.n_stages() != n || policy.n_stages() != n || buffers.len() != n || progress.learn_calls.len() != n {
            return Err(SdqlError::Format("stage counts of restored trainer parts disagree".into()));
        }
        if progress.phase > n || progress.episode >= config.params.episodes_per_phase.max(1) {
            return Err(SdqlError::Format(format!(
                "progress phase {} episode {} out of range",
                progress.phase, progress.episode
            )));
        }
        Ok(Self {
            env,
            config,
            policy,
            buffers,
            rng,
            progress,
            diagnostics,
        })
    }

    pub fn env(&self) -> &E {
        &self.env
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn policy(&self) -> &StackedPolicy {
        &self.policy
    }

    pub fn into_policy(self) -> StackedPolicy {
        self.policy
    }

    pub fn buffers(&self) -> &[ReplayBuffer] {
        &self.buffers
    }

    pub fn rng(&self) -> &SdqlRng {
        &self.rng
    }

    pub fn progress(&self) -> &Progress {
        &self.progress
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub fn is_done(&self) -> bool {
        self.progress.phase == 0
    }

    /// Greedy evaluation on the dedicated evaluation stream.
    pub fn evaluate(&self, n_episodes: usize) -> Result<EvalStats> {
        let mut rng = evaluation_rng(self.config.seed);
        Ok(evaluate(&self.policy, &self.env, n_episodes, &mut rng)?.0)
    }

    /// Runs one training episode; `None` once every phase has finished.
    pub fn run_episode(&mut self) -> Result<Option<EpisodeReport>> {
        if self.is_done() {
            return Ok(None);
        }
        let k = self.progress.phase;
        let n = self.config.stages.n_stages;
        let mut loss_sum = vec![0.0; n];
        let mut loss_count = vec![0usize; n];
        let mut state = reset_in_band(&self.env, k, &mut self.rng)?;
        let mut steps = 0;
        let mut success = false;
        while steps < self.config.stages.max_steps {
            let (t, next) = collect_step(&mut self.policy, &self.env, &state, true, &mut self.rng)?;
            if t.stage < k {
                return Err(SdqlError::StageViolation { from: k, to: t.stage });
            }
            let terminal = t.terminal;
            self.diagnostics.stage_transitions += t.stage_transitioned as u64;
            self.diagnostics.terminal_steps += terminal as u64;
            self.buffers[t.stage - 1].push(t)?;
            steps += 1;
            self.progress.env_steps += 1;
            if self.progress.env_steps.is_multiple_of(self.config.params.learn_every as u64) {
                self.learn_round(&mut loss_sum, &mut loss_count)?;
            }
            state = next;
            if terminal {
                success = true;
                break;
            }
        }

        self.progress.episode += 1;
        self.progress.episodes_done += 1;
        let episode = self.progress.episode;
        let phase_finished = episode == self.config.params.episodes_per_phase;
        if phase_finished {
            self.progress.phase -= 1;
            self.progress.episode = 0;
        }
        let eval = if self.progress.episodes_done.is_multiple_of(self.config.params.eval_every as u64) {
            Some(self.evaluate(self.config.params.eval_episodes)?)
        } else {
            None
        };
        Ok(Some(EpisodeReport {
            phase: k,
            episode,
            steps,
            success,
            mean_loss: loss_sum
                .iter()
                .zip(&loss_count)
                .map(|(s, &c)| (c > 0).then(|| s / c as f64))
                .collect(),
            phase_finished,
            eval,
        }))
    }

    /// One learn call per stage, last stage first, for every buffer past warmup.
    fn learn_round(&mut self, loss_sum: &mut [f64], loss_count: &mut [usize]) -> Result<()> {
        let p = &self.config.params;
        let min_len = p.warmup_steps.max(p.batch_size);
        for i in (1..=self.config.stages.n_stages).rev() {
            let buffer = &self.buffers[i - 1];
            if buffer.len() < min_len {
                continue;
            }
            let batch = buffer.sample(p.batch_size, &mut self.rng);
            let stats = self.policy.modules[i - 1].learn(&batch, self.config.stages.gamma(i), &mut self.rng)?;
            for (t, y) in batch.iter().zip(&stats.targets) {
                if t.truncates() {
                    self.diagnostics.truncation_checks += 1;
                    if y.to_bits() != t.reward.to_bits() {
                        self.diagnostics.truncation_violations += 1;
                    }
                }
            }
            if !stats.critic_loss.is_finite() {
                return Err(SdqlError::Numeric(format!("stage {i} loss is {}", stats.critic_loss)));
            }
            self.progress.learn_calls[i - 1] += 1;
            loss_sum[i - 1] += stats.critic_loss;
            loss_count[i - 1] += 1;
        }
        Ok(())
    }

    /// Trains to completion, handing every episode report to `on_episode`.
    pub fn run<F: FnMut(&Self, &EpisodeReport)>(&mut self, mut on_episode: F) -> Result<()> {
        while let Some(report) = self.run_episode()? {
            on_episode(self, &report);
        }
        Ok(())
    }
}

/// Trains a fresh stack with every phase from the last band back to the first.
pub fn train_backward<E: StagedEnv>(env: E, config: &TrainerConfig) -> Result<StackedPolicy> {
    let mut trainer = Trainer::new(env, config.clone())?;
    trainer.run(|_, _| {})?;
    Ok(trainer.into_policy())
}
