//! Per-stage Q-learning modules behind one interface.
//!
//! Every module exposes greedy/exploratory action selection, a state value
//! read from its *target* parameters (the source of cross-stage bootstrap
//! bonuses), and a learn step on a minibatch drawn from its own stage.

mod continuous;
mod ddpg;
mod dqn;
mod tabular;
mod td3;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqlError};
use crate::nncore::{AdamState, MlpParams, ParamGrads, GRAD_CLIP_NORM};
use crate::staged_mdp::{Action, ActionSpace, SdqlRng, Transition};

pub use ddpg::{DdpgConfig, DdpgModule};
pub use dqn::{DqnConfig, DqnModule};
pub use tabular::{
    tabular_backward_solve, tabular_flat_solve, tabular_stage_solve, TabularConfig, TabularModule,
    TabularQ, MAX_VALUE_ITERATIONS,
};
pub use td3::{Td3Config, Td3Module};

/// Diagnostics of one learn call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LearnStats {
    /// Mean squared TD error before the update.
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    /// Global gradient norm of the critic update before clipping.
    pub grad_norm: f64,
    /// Regression targets used for each batch entry, in batch order.
    pub targets: Vec<f64>,
}

pub trait QModule {
    fn action_space(&self) -> &ActionSpace;

    /// Greedy action when `explore` is false, deterministic in the parameters.
    fn act(&mut self, obs: &[f64], explore: bool, rng: &mut SdqlRng) -> Action;

    /// Greedy action from the online parameters.
    fn greedy_action(&self, obs: &[f64]) -> Action;

    /// State value computed from the target parameters.
    fn value(&self, obs: &[f64]) -> f64;

    fn learn(&mut self, batch: &[&Transition], gamma: f64, rng: &mut SdqlRng) -> Result<LearnStats>;

    /// Moves every target network a fraction `tau` towards its online network.
    fn sync_targets(&mut self, tau: f64) -> Result<()>;
}

/// Hyperparameters of the module used for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModuleConfig {
    Dqn(DqnConfig),
    Ddpg(DdpgConfig),
    Td3(Td3Config),
    Tabular(TabularConfig),
}

impl ModuleConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModuleConfig::Dqn(_) => "dqn",
            ModuleConfig::Ddpg(_) => "ddpg",
            ModuleConfig::Td3(_) => "td3",
            ModuleConfig::Tabular(_) => "tabular",
        }
    }

    pub fn needs_discrete(&self) -> bool {
        matches!(self, ModuleConfig::Dqn(_) | ModuleConfig::Tabular(_))
    }

    /// Checks the module kind against a stage's action space.
    pub fn check_space(&self, space: &ActionSpace) -> std::result::Result<(), String> {
        match (self.needs_discrete(), space.is_discrete()) {
            (true, false) => Err(format!(
                "{} needs a discrete action space but the stage is continuous",
                self.kind_name()
            )),
            (false, true) => Err(format!(
                "{} needs a continuous action space but the stage is discrete",
                self.kind_name()
            )),
            _ => Ok(()),
        }
    }
}

/// A module of any supported kind.
#[derive(Clone, Debug, PartialEq)]
pub enum StageModule {
    Dqn(DqnModule),
    Ddpg(DdpgModule),
    Td3(Td3Module),
    Tabular(TabularModule),
}

impl StageModule {
    pub fn build(config: &ModuleConfig, obs_dim: usize, space: &ActionSpace, seed: u64) -> Result<Self> {
        space.validate()?;
        config.check_space(space).map_err(SdqlError::InvalidConfig)?;
        Ok(match config {
            ModuleConfig::Dqn(c) => StageModule::Dqn(DqnModule::new(c, obs_dim, space.dim(), seed)?),
            ModuleConfig::Ddpg(c) => StageModule::Ddpg(DdpgModule::new(c, obs_dim, space, seed)?),
            ModuleConfig::Td3(c) => StageModule::Td3(Td3Module::new(c, obs_dim, space, seed)?),
            ModuleConfig::Tabular(c) => StageModule::Tabular(TabularModule::new(c, space.dim())?),
        })
    }

    fn inner(&self) -> &dyn QModule {
        match self {
            StageModule::Dqn(m) => m,
            StageModule::Ddpg(m) => m,
            StageModule::Td3(m) => m,
            StageModule::Tabular(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn QModule {
        match self {
            StageModule::Dqn(m) => m,
            StageModule::Ddpg(m) => m,
            StageModule::Td3(m) => m,
            StageModule::Tabular(m) => m,
        }
    }
}

impl QModule for StageModule {
    fn action_space(&self) -> &ActionSpace {
        self.inner().action_space()
    }

    fn act(&mut self, obs: &[f64], explore: bool, rng: &mut SdqlRng) -> Action {
        self.inner_mut().act(obs, explore, rng)
    }

    fn greedy_action(&self, obs: &[f64]) -> Action {
        self.inner().greedy_action(obs)
    }

    fn value(&self, obs: &[f64]) -> f64 {
        self.inner().value(obs)
    }

    fn learn(&mut self, batch: &[&Transition], gamma: f64, rng: &mut SdqlRng) -> Result<LearnStats> {
        self.inner_mut().learn(batch, gamma, rng)
    }

    fn sync_targets(&mut self, tau: f64) -> Result<()> {
        self.inner_mut().sync_targets(tau)
    }
}

/// Rejects empty batches and batches mixing stages.
pub fn check_batch(batch: &[&Transition]) -> Result<usize> {
    let first = batch
        .first()
        .ok_or_else(|| SdqlError::InvalidBatch("empty batch".into()))?
        .stage;
    if let Some(t) = batch.iter().find(|t| t.stage != first) {
        return Err(SdqlError::InvalidBatch(format!(
            "batch mixes stages {first} and {}",
            t.stage
        )));
    }
    Ok(first)
}

/// Regression targets: the stored reward for terminal or stage-transition
/// tuples, otherwise the reward plus the discounted bootstrap value.
pub fn td_targets(batch: &[&Transition], gamma: f64, next_values: &[f64]) -> Vec<f64> {
    batch
        .iter()
        .zip(next_values)
        .map(|(t, v)| if t.truncates() { t.reward } else { t.reward + gamma * v })
        .collect()
}

/// Linear epsilon schedule from `start` to `end` over `decay_steps` exploratory actions.
pub fn linear_epsilon(start: f64, end: f64, decay_steps: u64, steps: u64) -> f64 {
    if steps >= decay_steps {
        return end;
    }
    let frac = (steps as f64 / decay_steps as f64).min(1.0);
    start + (end - start) * frac
}

/// Greedy index with the lowest index winning ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Clips the gradient norm and applies one Adam step.
pub(crate) fn apply_grads(
    params: &mut MlpParams,
    adam: &mut AdamState,
    mut grads: ParamGrads,
    lr: f64,
) -> Result<f64> {
    if !grads.is_finite() {
        return Err(SdqlError::Numeric("non-finite gradient".into()));
    }
    let norm = grads.clip_global_norm(GRAD_CLIP_NORM);
    adam.step(params, &grads, lr)?;
    Ok(norm)
}

pub(crate) fn stack_obs(batch: &[&Transition], next: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch.len() * batch[0].state_obs.len());
    for t in batch {
        out.extend_from_slice(if next { &t.next_state_obs } else { &t.state_obs });
    }
    out
}

pub(crate) fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

pub(crate) fn default_tau() -> f64 {
    0.005
}
