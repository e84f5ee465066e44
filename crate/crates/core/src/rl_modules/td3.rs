use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqlError};
use crate::nncore::{soft_update, AdamState, MlpParams};
use crate::staged_mdp::{Action, ActionSpace, SdqlRng, Transition};

use super::continuous::{
    actor_gradient, batch_units, build_actor, build_critic, critic_inputs, critic_regression, explore_unit,
    ActionScale,
};
use super::ddpg::validate_actor_critic;
use super::{apply_grads, check_batch, default_hidden, default_tau, stack_obs, td_targets, LearnStats, QModule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Td3Config {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub tau: f64,
    /// Exploration noise standard deviation as a fraction of the action range.
    pub explore_noise: f64,
    /// Critic updates per actor update.
    pub policy_delay: u64,
    /// Target policy smoothing noise in unit action coordinates.
    pub target_noise_std: f64,
    pub target_noise_clip: f64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            actor_hidden: default_hidden(),
            critic_hidden: default_hidden(),
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            tau: default_tau(),
            explore_noise: 0.1,
            policy_delay: 2,
            target_noise_std: 0.2,
            target_noise_clip: 0.5,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> std::result::Result<(), String> {
        validate_actor_critic(
            self.actor_lr,
            self.critic_lr,
            self.tau,
            self.explore_noise,
            [&self.actor_hidden, &self.critic_hidden],
        )?;
        if self.policy_delay == 0 {
            return Err("policy_delay must be at least 1".into());
        }
        if !(self.target_noise_std >= 0.0 && self.target_noise_clip >= 0.0) {
            return Err(format!(
                "target_noise_std = {} and target_noise_clip = {} must be non-negative",
                self.target_noise_std, self.target_noise_clip
            ));
        }
        Ok(())
    }
}

/// Twin-critic actor-critic with delayed policy updates and target smoothing.
#[derive(Clone, Debug, PartialEq)]
pub struct Td3Module {
    pub actor: MlpParams,
    pub actor_target: MlpParams,
    pub critics: [MlpParams; 2],
    pub critic_targets: [MlpParams; 2],
    pub actor_adam: AdamState,
    pub critic_adams: [AdamState; 2],
    pub config: Td3Config,
    pub obs_dim: usize,
    /// Learn calls so far; the actor moves on every `policy_delay`-th call.
    pub learn_calls: u64,
    space: ActionSpace,
    scale: ActionScale,
}

impl Td3Module {
    pub fn new(config: &Td3Config, obs_dim: usize, space: &ActionSpace, seed: u64) -> Result<Self> {
        config.validate().map_err(SdqlError::InvalidConfig)?;
        let scale = ActionScale::from_space(space)?;
        let d = scale.dim();
        let actor = build_actor(obs_dim, &config.actor_hidden, d, seed)?;
        let c1 = build_critic(obs_dim, &config.critic_hidden, d, seed.wrapping_add(1))?;
        let c2 = build_critic(obs_dim, &config.critic_hidden, d, seed.wrapping_add(2))?;
        Ok(Self {
            actor_adam: AdamState::new(&actor),
            critic_adams: [AdamState::new(&c1), AdamState::new(&c2)],
            actor_target: actor.clone(),
            critic_targets: [c1.clone(), c2.clone()],
            actor,
            critics: [c1, c2],
            config: config.clone(),
            obs_dim,
            learn_calls: 0,
            space: space.clone(),
            scale,
        })
    }

    pub fn policy_unit(&self, obs: &[f64]) -> Vec<f64> {
        self.actor.forward(obs).expect("observation matches actor input")
    }

    /// Smoothed target actions for a batch of next observations.
    fn target_actions(&self, next_obs: &[f64], n: usize, rng: &mut SdqlRng) -> Result<Vec<f64>> {
        let mut units = self.actor_target.forward_batch(next_obs, n)?.output().to_vec();
        let clip = self.config.target_noise_clip;
        for u in units.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            let noise = (self.config.target_noise_std * z).clamp(-clip, clip);
            *u = (*u + noise).clamp(-1.0, 1.0);
        }
        Ok(units)
    }
}

/// Elementwise minimum of the twin critic estimates.
pub(crate) fn twin_min(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x.min(*y)).collect()
}

impl QModule for Td3Module {
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
        let q1 = self.critic_targets[0].forward(&input).expect("critic input")[0];
        let q2 = self.critic_targets[1].forward(&input).expect("critic input")[0];
        q1.min(q2)
    }

    fn learn(&mut self, batch: &[&Transition], gamma: f64, rng: &mut SdqlRng) -> Result<LearnStats> {
        check_batch(batch)?;
        let n = batch.len();
        let d = self.scale.dim();
        let obs = stack_obs(batch, false);
        let next_obs = stack_obs(batch, true);
        let units = batch_units(batch, &self.scale)?;

        let next_units = self.target_actions(&next_obs, n, rng)?;
        let next_in = critic_inputs(&next_obs, self.obs_dim, &next_units, d, n);
        let q1 = self.critic_targets[0].forward_batch(&next_in, n)?;
        let q2 = self.critic_targets[1].forward_batch(&next_in, n)?;
        let targets = td_targets(batch, gamma, &twin_min(q1.output(), q2.output()));

        let inputs = critic_inputs(&obs, self.obs_dim, &units, d, n);
        let mut critic_loss = 0.0;
        let mut grad_norm = 0.0;
        for i in 0..2 {
            let (grads, loss) = critic_regression(&self.critics[i], &inputs, n, &targets)?;
            let norm = apply_grads(&mut self.critics[i], &mut self.critic_adams[i], grads, self.config.critic_lr)?;
            critic_loss += 0.5 * loss;
            grad_norm = f64::max(grad_norm, norm);
        }

        self.learn_calls += 1;
        let tau = self.config.tau;
        let mut actor_loss = None;
        if self.learn_calls.is_multiple_of(self.config.policy_delay) {
            let (grads, loss) = actor_gradient(&self.actor, &self.critics[0], &obs, self.obs_dim, n)?;
            apply_grads(&mut self.actor, &mut self.actor_adam, grads, self.config.actor_lr)?;
            soft_update(&mut self.actor_target, &self.actor, tau)?;
            actor_loss = Some(loss);
        }
        for i in 0..2 {
            soft_update(&mut self.critic_targets[i], &self.critics[i], tau)?;
        }
        Ok(LearnStats {
            critic_loss,
            actor_loss,
            grad_norm,
            targets,
        })
    }

    fn sync_targets(&mut self, tau: f64) -> Result<()> {
        soft_update(&mut self.actor_target, &self.actor, tau)?;
        for i in 0..2 {
            soft_update(&mut self.critic_targets[i], &self.critics[i], tau)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn module(config: Td3Config) -> Td3Module {
        Td3Module::new(&config, 2, &ActionSpace::symmetric_box(1.0, 1), 9).unwrap()
    }

    fn transition() -> Transition {
        Transition {
            state_obs: vec![0.3, -0.1],
            action: Action::Continuous(vec![0.5]),
            reward: 0.0,
            next_state_obs: vec![0.2, 0.4],
            terminal: false,
            stage_transitioned: false,
            stage: 1,
        }
    }

    #[test]
    fn twin_minimum() {
        assert_eq!(twin_min(&[2.0, 5.0], &[3.0, 1.0]), vec![2.0, 1.0]);
    }

    #[test]
    fn critics_are_seeded_independently() {
        let m = module(Td3Config::default());
        assert_ne!(m.critics[0], m.critics[1]);
    }

    #[test]
    fn target_uses_smaller_critic() {
        let mut m = module(Td3Config::default());
        for (c, bias) in m.critic_targets.iter_mut().zip([2.0, 3.0]) {
            for l in c.layers.iter_mut() {
                l.weights.iter_mut().for_each(|w| *w = 0.0);
                l.biases.iter_mut().for_each(|b| *b = 0.0);
            }
            c.layers.last_mut().unwrap().biases[0] = bias;
        }
        let mut rng = SdqlRng::seed_from_u64(0);
        let t = transition();
        let stats = m.learn(&[&t], 0.5, &mut rng).unwrap();
        assert_eq!(stats.targets, vec![1.0]);
    }

    #[test]
    fn zero_noise_target_action_is_target_actor() {
        let m = module(Td3Config { target_noise_std: 0.0, ..Default::default() });
        let mut rng = SdqlRng::seed_from_u64(3);
        let next = [0.2, 0.4, -1.0, 0.7];
        let smoothed = m.target_actions(&next, 2, &mut rng).unwrap();
        let plain = m.actor_target.forward_batch(&next, 2).unwrap().output().to_vec();
        assert_eq!(smoothed, plain);
    }

    #[test]
    fn smoothing_noise_is_clipped() {
        let m = module(Td3Config { target_noise_std: 100.0, target_noise_clip: 0.5, ..Default::default() });
        let mut rng = SdqlRng::seed_from_u64(4);
        let next = [0.2, 0.4];
        let plain = m.actor_target.forward(&next).unwrap()[0];
        for _ in 0..100 {
            let u = m.target_actions(&next, 1, &mut rng).unwrap()[0];
            assert!((u - plain).abs() <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn actor_updates_are_delayed() {
        let mut m = module(Td3Config::default());
        let mut rng = SdqlRng::seed_from_u64(0);
        let t = transition();
        let actor0 = m.actor.clone();
        let critic0 = m.critics[0].clone();
        let s1 = m.learn(&[&t], 0.9, &mut rng).unwrap();
        assert_eq!(m.actor, actor0);
        assert_ne!(m.critics[0], critic0);
        assert!(s1.actor_loss.is_none());
        let s2 = m.learn(&[&t], 0.9, &mut rng).unwrap();
        assert_ne!(m.actor, actor0);
        assert!(s2.actor_loss.is_some());
    }
}
