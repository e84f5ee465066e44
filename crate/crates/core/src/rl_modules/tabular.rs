//! Table-based Q learning and exact value iteration on finite staged tasks.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqlError};
use crate::staged_mdp::{Action, ActionSpace, FiniteStagedEnv, SdqlRng, Transition};

use super::{argmax, check_batch, linear_epsilon, LearnStats, QModule};

/// Sweep cap for value iteration.
pub const MAX_VALUE_ITERATIONS: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularConfig {
    /// Step size of the Q update; 1 overwrites the entry with its target.
    pub lr: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: u64,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 10_000,
        }
    }
}

impl TabularConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lr > 0.0 && self.lr <= 1.0) {
            return Err(format!("lr = {} must lie in (0, 1]", self.lr));
        }
        if !(0.0 <= self.epsilon_end && self.epsilon_end <= self.epsilon_start && self.epsilon_start <= 1.0) {
            return Err(format!(
                "epsilon_start = {} and epsilon_end = {} must satisfy 0 <= end <= start <= 1",
                self.epsilon_start, self.epsilon_end
            ));
        }
        Ok(())
    }
}

/// Q table keyed by the bit patterns of the observation.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularModule {
    pub table: BTreeMap<Vec<u64>, Vec<f64>>,
    pub config: TabularConfig,
    pub n_actions: usize,
    pub explore_steps: u64,
    space: ActionSpace,
}

fn obs_key(obs: &[f64]) -> Vec<u64> {
    obs.iter().map(|v| v.to_bits()).collect()
}

impl TabularModule {
    pub fn new(config: &TabularConfig, n_actions: usize) -> Result<Self> {
        config.validate().map_err(SdqlError::InvalidConfig)?;
        Ok(Self {
            table: BTreeMap::new(),
            config: config.clone(),
            n_actions,
            explore_steps: 0,
            space: ActionSpace::Discrete { n: n_actions },
        })
    }

    /// Q values of an observation; unseen observations read as zero.
    pub fn q_values(&self, obs: &[f64]) -> Vec<f64> {
        self.table
            .get(&obs_key(obs))
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.n_actions])
    }

    pub fn epsilon(&self) -> f64 {
        linear_epsilon(
            self.config.epsilon_start,
            self.config.epsilon_end,
            self.config.epsilon_decay_steps,
            self.explore_steps,
        )
    }
}

impl QModule for TabularModule {
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
        Action::Discrete(argmax(&self.q_values(obs)))
    }

    fn value(&self, obs: &[f64]) -> f64 {
        self.q_values(obs).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    fn learn(&mut self, batch: &[&Transition], gamma: f64, _rng: &mut SdqlRng) -> Result<LearnStats> {
        check_batch(batch)?;
        let mut loss = 0.0;
        let mut targets = Vec::with_capacity(batch.len());
        for t in batch {
            let a = match t.action {
                Action::Discrete(a) if a < self.n_actions => a,
                ref other => {
                    return Err(SdqlError::InvalidBatch(format!(
                        "action {other:?} invalid for {} actions",
                        self.n_actions
                    )))
                }
            };
            let y = if t.truncates() {
                t.reward
            } else {
                t.reward + gamma * self.value(&t.next_state_obs)
            };
            let n = self.n_actions;
            let row = self.table.entry(obs_key(&t.state_obs)).or_insert_with(|| vec![0.0; n]);
            let td = row[a] - y;
            row[a] -= self.config.lr * td;
            loss += td * td;
            targets.push(y);
        }
        let critic_loss = loss / batch.len() as f64;
        if !critic_loss.is_finite() {
            return Err(SdqlError::Numeric(format!("tabular loss is {critic_loss}")));
        }
        Ok(LearnStats {
            critic_loss,
            actor_loss: None,
            grad_norm: 0.0,
            targets,
        })
    }

    /// The table is its own target.
    fn sync_targets(&mut self, _tau: f64) -> Result<()> {
        Ok(())
    }
}

/// Exact action values of a finite task, one row of `n_actions` per state id.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularQ {
    pub n_states: usize,
    pub n_actions: usize,
    pub q: Vec<f64>,
}

impl TabularQ {
    fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            q: vec![0.0; n_states * n_actions],
        }
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.q[id * self.n_actions..(id + 1) * self.n_actions]
    }

    pub fn get(&self, id: usize, action: usize) -> f64 {
        self.q[id * self.n_actions + action]
    }

    pub fn value(&self, id: usize) -> f64 {
        self.row(id).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn greedy(&self, id: usize) -> usize {
        argmax(self.row(id))
    }

    /// Every action within `tol` of the best one.
    pub fn greedy_set(&self, id: usize, tol: f64) -> Vec<usize> {
        let v = self.value(id);
        (0..self.n_actions).filter(|&a| self.get(id, a) >= v - tol).collect()
    }

    pub fn max_abs_diff(&self, other: &TabularQ) -> f64 {
        self.q
            .iter()
            .zip(&other.q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn check_discounts<E: FiniteStagedEnv>(env: &E, discounts: &[f64]) -> Result<()> {
    if discounts.len() != env.n_stages() {
        return Err(SdqlError::InvalidConfig(format!(
            "{} discounts for {} stages",
            discounts.len(),
            env.n_stages()
        )));
    }
    if let Some(g) = discounts.iter().find(|g| !(**g >= 0.0 && **g < 1.0)) {
        return Err(SdqlError::InvalidConfig(format!("discount {g} must lie in [0, 1)")));
    }
    Ok(())
}

/// Runs value iteration over the states accepted by `active`, with
/// `backup(state_id, action, v)` giving the one-step lookahead.
fn value_iteration<F>(n_states: usize, n_actions: usize, active: &[bool], tol: f64, mut backup: F) -> Result<TabularQ>
where
    F: FnMut(usize, usize, &[f64]) -> f64,
{
    let mut q = TabularQ::zeros(n_states, n_actions);
    let mut v = vec![0.0; n_states];
    for _ in 0..MAX_VALUE_ITERATIONS {
        let mut delta: f64 = 0.0;
        for id in (0..n_states).filter(|&id| active[id]) {
            for a in 0..n_actions {
                q.q[id * n_actions + a] = backup(id, a, &v);
            }
        }
        for id in (0..n_states).filter(|&id| active[id]) {
            let nv = q.value(id);
            delta = delta.max((nv - v[id]).abs());
            v[id] = nv;
        }
        if !delta.is_finite() {
            return Err(SdqlError::Numeric("value iteration diverged".into()));
        }
        if delta <= tol {
            return Ok(q);
        }
    }
    Err(SdqlError::Numeric(format!(
        "value iteration did not reach tolerance {tol} within {MAX_VALUE_ITERATIONS} sweeps"
    )))
}

/// Optimal Q of the whole task where a state's discount is that of its stage.
pub fn tabular_flat_solve<E: FiniteStagedEnv>(env: &E, discounts: &[f64], tol: f64) -> Result<TabularQ> {
    check_discounts(env, discounts)?;
    let n = env.n_states();
    let states: Vec<E::State> = (0..n).map(|id| env.state_from_id(id)).collect();
    let active: Vec<bool> = states.iter().map(|s| !env.is_terminal(s)).collect();
    value_iteration(n, env.n_actions(), &active, tol, |id, a, v| {
        let s = &states[id];
        let gamma = discounts[env.stage_of(s) - 1];
        env.outcomes(s, a)
            .iter()
            .map(|o| {
                let boot = if o.terminal { 0.0 } else { gamma * v[env.state_id(&o.next_state)] };
                o.prob * (o.reward + boot)
            })
            .sum()
    })
}

/// Optimal Q of one stage under the stage-modified reward, given the state
/// values of the next stage. Rows of states outside the stage stay zero.
pub fn tabular_stage_solve<E: FiniteStagedEnv>(
    env: &E,
    stage: usize,
    v_next: &[f64],
    gamma: f64,
    tol: f64,
) -> Result<TabularQ> {
    let n = env.n_states();
    if v_next.len() != n {
        return Err(SdqlError::Shape(format!("v_next has {} entries for {n} states", v_next.len())));
    }
    let states: Vec<E::State> = (0..n).map(|id| env.state_from_id(id)).collect();
    let active: Vec<bool> = states
        .iter()
        .map(|s| env.stage_of(s) == stage && !env.is_terminal(s))
        .collect();
    let mut violation = None;
    let q = value_iteration(n, env.n_actions(), &active, tol, |id, a, v| {
        env.outcomes(&states[id], a)
            .iter()
            .map(|o| {
                let next = env.state_id(&o.next_state);
                let to = env.stage_of(&o.next_state);
                let boot = if o.terminal {
                    0.0
                } else if to == stage {
                    gamma * v[next]
                } else if to == stage + 1 {
                    gamma * v_next[next]
                } else {
                    violation = Some(to);
                    0.0
                };
                o.prob * (o.reward + boot)
            })
            .sum()
    })?;
    if let Some(to) = violation {
        return Err(SdqlError::StageViolation { from: stage, to });
    }
    Ok(q)
}

/// Stage-by-stage solve from the last stage back to the first, each stage
/// seeing the next one only through its entry-state values.
pub fn tabular_backward_solve<E: FiniteStagedEnv>(env: &E, discounts: &[f64], tol: f64) -> Result<TabularQ> {
    check_discounts(env, discounts)?;
    let n = env.n_states();
    let na = env.n_actions();
    let stage_ids: Vec<usize> = (0..n).map(|id| env.stage_of(&env.state_from_id(id))).collect();
    let terminal: Vec<bool> = (0..n).map(|id| env.is_terminal(&env.state_from_id(id))).collect();
    let mut merged = TabularQ::zeros(n, na);
    let mut v_next = vec![0.0; n];
    for k in (1..=env.n_stages()).rev() {
        let q = tabular_stage_solve(env, k, &v_next, discounts[k - 1], tol)?;
        let mut v_stage = vec![0.0; n];
        for id in (0..n).filter(|&id| stage_ids[id] == k) {
            merged.q[id * na..(id + 1) * na].copy_from_slice(q.row(id));
            if !terminal[id] {
                v_stage[id] = q.value(id);
            }
        }
        v_next = v_stage;
    }
    Ok(merged)
}
