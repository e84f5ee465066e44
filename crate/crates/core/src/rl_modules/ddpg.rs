use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqlError};
use crate::nncore::{soft_update, AdamState, MlpParams};
use crate::staged_mdp::{Action, ActionSpace, SdqlRng, Transition};

use super::continuous::{
    actor_gradient, batch_units, build_actor, build_critic, critic_inputs, critic_regression, explore_unit,
    ActionScale,
};
use super::{apply_grads, check_batch, default_hidden, default_tau, stack_obs, td_targets, LearnStats, QModule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub tau: f64,
    /// Exploration noise standard deviation as a fraction of the action range.
    pub explore_noise: f64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            actor_hidden: default_hidden(),
            critic_hidden: default_hidden(),
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            tau: default_tau(),
            explore_noise: 0.1,
        }
    }
}

pub(crate) fn validate_actor_critic(
    actor_lr: f64,
    critic_lr: f64,
    tau: f64,
    explore_noise: f64,
    hidden: [&[usize]; 2],
) -> std::result::Result<(), String> {
    if !(actor_lr > 0.0 && critic_lr > 0.0) {
        return Err(format!("actor_lr = {actor_lr} and critic_lr = {critic_lr} must be positive"));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(format!("tau = {tau} must lie in [0, 1]"));
    }
    if !(explore_noise >= 0.0) {
        return Err(format!("explore_noise = {explore_noise} must be non-negative"));
    }
    if hidden.iter().any(|h| h.contains(&0)) {
        return Err("hidden layer sizes must be positive".into());
    }
    Ok(())
}

/// Deterministic actor with a single critic.
#[derive(Clone, Debug, PartialEq)]
pub struct DdpgModule {
    pub actor: MlpParams,
    pub actor_target: MlpParams,
    pub critic: MlpParams,
    pub critic_target: MlpParams,
    pub actor_adam: AdamState,
    pub critic_adam: AdamState,
    pub config: DdpgConfig,
    pub obs_dim: usize,
    space: ActionSpace,
    scale: ActionScale,
}

impl DdpgModule {
    pub fn new(config: &DdpgConfig, obs_dim: usize, space: &ActionSpace, seed: u64) -> Result<Self> {
        validate_actor_critic(
            config.actor_lr,
            config.critic_lr,
            config.tau,
            config.explore_noise,
            [&config.actor_hidden, &config.critic_hidden],
        )
        .map_err(SdqlError::InvalidConfig)?;
        let scale = ActionScale::from_space(space)?;
        let d = scale.dim();
        let actor = build_actor(obs_dim, &config.actor_hidden, d, seed)?;
        let critic = build_critic(obs_dim, &config.critic_hidden, d, seed.wrapping_add(1))?;
        Ok(Self {
            actor_adam: AdamState::new(&actor),
            critic_adam: AdamState::new(&critic),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor,
            critic,
            config: config.clone(),
            obs_dim,
            space: space.clone(),
            scale,
        })
    }

    /// Unit-scale greedy action of the online actor.
    pub fn policy_unit(&self, obs: &[f64]) -> Vec<f64> {
        self.actor.forward(obs).expect("observation matches actor input")
    }

    /// Online critic estimate for an environment-scale action.
    pub fn q_value(&self, obs: &[f64], action: &[f64]) -> f64 {
        let mut input = obs.to_vec();
        input.extend(self.scale.to_unit(action));
        self.critic.forward(&input).expect("critic input")[0]
    }
}

impl QModule for DdpgModule {
    fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    fn act(&mut self, obs: &[f64], explore: bool, rng: &mut SdqlRng) -> Action {
        let mut unit = self.policy_unit(obs);
        if explore {
            explore_unit(&mut unit, 2.0 * self.config.explore_noise, rng);
        }
        Action::Continuous(self.scale.to_env(&unit))
    }

    fn greedy_action(&self, obs: &[f64]) -> Action {
        Action::Continuous(self.scale.to_env(&self.policy_unit(obs)))
    }

    fn value(&self, obs: &[f64]) -> f64 {
        let unit = self.actor_target.forward(obs).expect("observation matches actor input");
        let mut input = obs.to_vec();
        input.extend(unit);
        self.critic_target.forward(&input).expect("critic input")[0]
    }

    fn learn(&mut self, batch: &[&Transition], gamma: f64, _rng: &mut SdqlRng) -> Result<LearnStats> {
        check_batch(batch)?;
        let n = batch.len();
        let d = self.scale.dim();
        let obs = stack_obs(batch, false);
        let next_obs = stack_obs(batch, true);
        let units = batch_units(batch, &self.scale)?;

        let next_units = self.actor_target.forward_batch(&next_obs, n)?;
        let next_in = critic_inputs(&next_obs, self.obs_dim, next_units.output(), d, n);
        let next_q = self.critic_target.forward_batch(&next_in, n)?;
        let targets = td_targets(batch, gamma, next_q.output());

        let inputs = critic_inputs(&obs, self.obs_dim, &units, d, n);
        let (grads, critic_loss) = critic_regression(&self.critic, &inputs, n, &targets)?;
        let grad_norm = apply_grads(&mut self.critic, &mut self.critic_adam, grads, self.config.critic_lr)?;

        let (actor_grads, actor_loss) = actor_gradient(&self.actor, &self.critic, &obs, self.obs_dim, n)?;
        apply_grads(&mut self.actor, &mut self.actor_adam, actor_grads, self.config.actor_lr)?;

        self.sync_targets(self.config.tau)?;
        Ok(LearnStats {
            critic_loss,
            actor_loss: Some(actor_loss),
            grad_norm,
            targets,
        })
    }

    fn sync_targets(&mut self, tau: f64) -> Result<()> {
        soft_update(&mut self.actor_target, &self.actor, tau)?;
        soft_update(&mut self.critic_target, &self.critic, tau)
    }
}
