use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqlError};
use crate::nncore::{soft_update, AdamState, HiddenActivation, MlpParams, OutputActivation};
use crate::staged_mdp::{Action, ActionSpace, SdqlRng, Transition};

use super::{apply_grads, argmax, check_batch, default_hidden, default_tau, linear_epsilon, stack_obs, td_targets, LearnStats, QModule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub tau: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Exploratory actions over which epsilon decays linearly.
    pub epsilon_decay_steps: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            lr: 1e-3,
            tau: default_tau(),
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 10_000,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lr > 0.0) {
            return Err(format!("lr = {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(format!("tau = {} must lie in [0, 1]", self.tau));
        }
        if !(0.0 <= self.epsilon_end && self.epsilon_end <= self.epsilon_start && self.epsilon_start <= 1.0) {
            return Err(format!(
                "epsilon_start = {} and epsilon_end = {} must satisfy 0 <= end <= start <= 1",
                self.epsilon_start, self.epsilon_end
            ));
        }
        if self.hidden.contains(&0) {
            return Err("hidden layer sizes must be positive".into());
        }
        Ok(())
    }
}

/// Deep Q network over a discrete action set.
#[derive(Clone, Debug, PartialEq)]
pub struct DqnModule {
    pub online: MlpParams,
    pub target: MlpParams,
    pub adam: AdamState,
    pub config: DqnConfig,
    pub n_actions: usize,
    /// Exploratory actions taken so far; drives the epsilon schedule.
    pub explore_steps: u64,
    space: ActionSpace,
}

impl DqnModule {
    pub fn new(config: &DqnConfig, obs_dim: usize, n_actions: usize, seed: u64) -> Result<Self> {
        config.validate().map_err(SdqlError::InvalidConfig)?;
        let mut sizes = vec![obs_dim];
        sizes.extend(&config.hidden);
        sizes.push(n_actions);
        let online = MlpParams::new(&sizes, HiddenActivation::Relu, OutputActivation::Linear, seed)?;
        Ok(Self::from_parts(config.clone(), online.clone(), online, 0))
    }

    pub fn from_parts(config: DqnConfig, online: MlpParams, target: MlpParams, explore_steps: u64) -> Self {
        let n_actions = online.output_dim();
        let adam = AdamState::new(&online);
        Self {
            online,
            target,
            adam,
            config,
            n_actions,
            explore_steps,
            space: ActionSpace::Discrete { n: n_actions },
        }
    }

    pub fn epsilon(&self) -> f64 {
        linear_epsilon(
            self.config.epsilon_start,
            self.config.epsilon_end,
            self.config.epsilon_decay_steps,
            self.explore_steps,
        )
    }

    pub fn q_values(&self, obs: &[f64]) -> Vec<f64> {
        self.online.forward(obs).expect("observation matches network input")
    }

    pub fn greedy(&self, obs: &[f64]) -> usize {
        argmax(&self.q_values(obs))
    }
}

impl QModule for DqnModule {
    fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    fn act(&mut self, obs: &[f64], explore: bool, rng: &mut SdqlRng) -> Action {
        if explore {
            let eps = self.epsilon();
            self.explore_steps += 1;
            if rng.random::<f64>() < eps {
                return Action::Discrete(rng.random_range(0..self.n_actions));
            }
        }
        self.greedy_action(obs)
    }

    fn greedy_action(&self, obs: &[f64]) -> Action {
        Action::Discrete(self.greedy(obs))
    }

    fn value(&self, obs: &[f64]) -> f64 {
        self.target
            .forward(obs)
            .expect("observation matches network input")
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    fn learn(&mut self, batch: &[&Transition], gamma: f64, _rng: &mut SdqlRng) -> Result<LearnStats> {
        check_batch(batch)?;
        let n = batch.len();
        let na = self.n_actions;
        let actions: Vec<usize> = batch
            .iter()
            .map(|t| match t.action {
                Action::Discrete(a) if a < na => Ok(a),
                ref other => Err(SdqlError::InvalidBatch(format!("action {other:?} invalid for {na} actions"))),
            })
            .collect::<Result<_>>()?;

        let next_q = self.target.forward_batch(&stack_obs(batch, true), n)?;
        let next_v: Vec<f64> = next_q
            .output()
            .chunks(na)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let targets = td_targets(batch, gamma, &next_v);

        let acts = self.online.forward_batch(&stack_obs(batch, false), n)?;
        let q = acts.output();
        let mut upstream = vec![0.0; n * na];
        let mut loss = 0.0;
        for (b, (&a, &y)) in actions.iter().zip(&targets).enumerate() {
            let td = q[b * na + a] - y;
            loss += td * td;
            upstream[b * na + a] = 2.0 * td / n as f64;
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(SdqlError::Numeric(format!("DQN loss is {loss}")));
        }
        let (grads, _) = self.online.backward_batch(&acts, &upstream, false)?;
        let grad_norm = apply_grads(&mut self.online, &mut self.adam, grads, self.config.lr)?;
        self.sync_targets(self.config.tau)?;
        Ok(LearnStats {
            critic_loss: loss,
            actor_loss: None,
            grad_norm,
            targets,
        })
    }

    fn sync_targets(&mut self, tau: f64) -> Result<()> {
        soft_update(&mut self.target, &self.online, tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn transition(reward: f64, terminal: bool, transitioned: bool) -> Transition {
        Transition {
            state_obs: vec![0.5, -0.5],
            action: Action::Discrete(1),
            reward,
            next_state_obs: vec![0.1, 0.2],
            terminal,
            stage_transitioned: transitioned,
            stage: 1,
        }
    }

    /// Module whose online and target networks output `c` for every action.
    fn constant(c: f64) -> DqnModule {
        let mut net = MlpParams::zeros(&[2, 3], HiddenActivation::Relu, OutputActivation::Linear).unwrap();
        net.layers[0].biases = vec![c; 3];
        DqnModule::from_parts(DqnConfig { hidden: vec![], ..Default::default() }, net.clone(), net, 0)
    }

    #[test]
    fn terminal_and_transition_targets_equal_reward() {
        let mut rng = SdqlRng::seed_from_u64(0);
        let mut m = constant(5.0);
        let t = transition(1.0, true, false);
        let stats = m.learn(&[&t], 0.99, &mut rng).unwrap();
        assert_eq!(stats.targets, vec![1.0]);
        let mut m = constant(5.0);
        let t = transition(0.42, false, true);
        let stats = m.learn(&[&t], 0.99, &mut rng).unwrap();
        assert_eq!(stats.targets, vec![0.42]);
    }

    #[test]
    fn constant_network_loss() {
        let mut rng = SdqlRng::seed_from_u64(0);
        let c = 3.0;
        let mut m = constant(c);
        let t = transition(0.0, false, false);
        let stats = m.learn(&[&t], 0.9, &mut rng).unwrap();
        assert!((stats.critic_loss - 0.01 * c * c).abs() < 1e-12);
        assert!(stats.grad_norm > 0.0);
    }

    #[test]
    fn greedy_ties_break_low() {
        let mut net = MlpParams::zeros(&[1, 4], HiddenActivation::Relu, OutputActivation::Linear).unwrap();
        net.layers[0].biases = vec![0.1, 0.9, 0.9, 0.2];
        let mut m = DqnModule::from_parts(DqnConfig { hidden: vec![], ..Default::default() }, net.clone(), net, 0);
        let mut rng = SdqlRng::seed_from_u64(0);
        assert_eq!(m.act(&[0.0], false, &mut rng), Action::Discrete(1));
        // epsilon = 0 coincides with greedy selection
        m.config.epsilon_start = 0.0;
        m.config.epsilon_end = 0.0;
        for _ in 0..100 {
            assert_eq!(m.act(&[0.0], true, &mut rng), Action::Discrete(1));
        }
        assert_eq!(m.value(&[0.0]), 0.9);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut m = constant(0.0);
        m.config.epsilon_end = 1.0;
        let mut rng = SdqlRng::seed_from_u64(17);
        let draws = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            counts[m.act(&[0.0, 0.0], true, &mut rng).as_discrete().unwrap()] += 1;
        }
        let expected = draws as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi-square with 2 degrees of freedom: P(X > 9.21) = 0.01
        assert!(chi2 < 9.21, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn rejects_invalid_batches() {
        let mut rng = SdqlRng::seed_from_u64(0);
        let mut m = constant(0.0);
        let a = transition(0.0, false, false);
        let mut b = transition(0.0, false, false);
        b.stage = 2;
        assert!(matches!(m.learn(&[&a, &b], 0.9, &mut rng), Err(SdqlError::InvalidBatch(_))));
        let mut c = transition(0.0, false, false);
        c.action = Action::Discrete(7);
        assert!(matches!(m.learn(&[&c], 0.9, &mut rng), Err(SdqlError::InvalidBatch(_))));
    }

    #[test]
    fn learning_reduces_loss_on_fixed_target() {
        let mut rng = SdqlRng::seed_from_u64(0);
        let mut m = DqnModule::new(&DqnConfig { lr: 1e-2, ..Default::default() }, 2, 3, 4).unwrap();
        let t = transition(1.0, true, false);
        let first = m.learn(&[&t], 0.9, &mut rng).unwrap().critic_loss;
        let mut last = first;
        for _ in 0..200 {
            last = m.learn(&[&t], 0.9, &mut rng).unwrap().critic_loss;
        }
        assert!(last < 1e-3 * first.max(1e-3), "{first} -> {last}");
    }
}
