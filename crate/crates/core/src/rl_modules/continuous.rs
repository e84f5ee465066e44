//! Pieces shared by the actor-critic modules.
//!
//! Actors emit a tanh-squashed action `u ∈ [-1, 1]^d`; critics consume the
//! observation concatenated with that unit-scale action. Environment actions
//! are the affine image of `u` onto the box bounds.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SdqlError};
use crate::nncore::{HiddenActivation, MlpParams, OutputActivation, ParamGrads};
use crate::staged_mdp::{Action, ActionSpace, SdqlRng, Transition};

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ActionScale {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl ActionScale {
    pub fn from_space(space: &ActionSpace) -> Result<Self> {
        match space {
            ActionSpace::Box { low, high } => Ok(Self {
                low: low.clone(),
                high: high.clone(),
            }),
            ActionSpace::Discrete { .. } => Err(SdqlError::InvalidConfig(
                "actor-critic modules need a box action space".into(),
            )),
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn to_env(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(u, (l, h))| l + (u.clamp(-1.0, 1.0) + 1.0) * 0.5 * (h - l))
            .collect()
    }

    pub fn to_unit(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(a, (l, h))| (2.0 * (a - l) / (h - l) - 1.0).clamp(-1.0, 1.0))
            .collect()
    }
}

pub(crate) fn build_actor(obs_dim: usize, hidden: &[usize], act_dim: usize, seed: u64) -> Result<MlpParams> {
    let mut sizes = vec![obs_dim];
    sizes.extend(hidden);
    sizes.push(act_dim);
    let mut actor = MlpParams::new(&sizes, HiddenActivation::Relu, OutputActivation::Tanh, seed)?;
    shrink_output_layer(&mut actor);
    Ok(actor)
}

pub(crate) fn build_critic(obs_dim: usize, hidden: &[usize], act_dim: usize, seed: u64) -> Result<MlpParams> {
    let mut sizes = vec![obs_dim + act_dim];
    sizes.extend(hidden);
    sizes.push(1);
    let mut critic = MlpParams::new(&sizes, HiddenActivation::Relu, OutputActivation::Linear, seed)?;
    shrink_output_layer(&mut critic);
    Ok(critic)
}

/// Output weights start in `[-OUTPUT_INIT, OUTPUT_INIT]` so fresh actors act near zero.
pub(crate) const OUTPUT_INIT: f64 = 3e-3;

fn shrink_output_layer(net: &mut MlpParams) {
    let last = net.layers.last_mut().expect("network has a layer");
    let factor = OUTPUT_INIT * (last.n_in as f64).sqrt();
    last.weights.iter_mut().for_each(|w| *w *= factor);
}

/// Row-wise concatenation of observations and unit actions.
pub(crate) fn critic_inputs(obs: &[f64], obs_dim: usize, units: &[f64], act_dim: usize, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * (obs_dim + act_dim));
    for b in 0..n {
        out.extend_from_slice(&obs[b * obs_dim..(b + 1) * obs_dim]);
        out.extend_from_slice(&units[b * act_dim..(b + 1) * act_dim]);
    }
    out
}

pub(crate) fn batch_units(batch: &[&Transition], scale: &ActionScale) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(batch.len() * scale.dim());
    for t in batch {
        match &t.action {
            Action::Continuous(a) if a.len() == scale.dim() => out.extend(scale.to_unit(a)),
            other => {
                return Err(SdqlError::InvalidBatch(format!(
                    "action {other:?} does not fit a {}-dimensional box",
                    scale.dim()
                )))
            }
        }
    }
    Ok(out)
}

/// Gaussian exploration around the actor output, clipped to the unit box.
pub(crate) fn explore_unit(unit: &mut [f64], std: f64, rng: &mut SdqlRng) {
    for u in unit.iter_mut() {
        let noise: f64 = rng.sample(StandardNormal);
        *u = (*u + std * noise).clamp(-1.0, 1.0);
    }
}

/// One critic regression step towards `targets`; returns the parameter
/// gradients and the pre-update mean squared error.
pub(crate) fn critic_regression(
    critic: &MlpParams,
    inputs: &[f64],
    n: usize,
    targets: &[f64],
) -> Result<(ParamGrads, f64)> {
    let acts = critic.forward_batch(inputs, n)?;
    let q = acts.output();
    let mut upstream = vec![0.0; n];
    let mut loss = 0.0;
    for b in 0..n {
        let td = q[b] - targets[b];
        loss += td * td;
        upstream[b] = 2.0 * td / n as f64;
    }
    loss /= n as f64;
    if !loss.is_finite() {
        return Err(SdqlError::Numeric(format!("critic loss is {loss}")));
    }
    let (grads, _) = critic.backward_batch(&acts, &upstream, false)?;
    Ok((grads, loss))
}

/// Deterministic policy gradient: gradients of `-mean_b Q(s_b, actor(s_b))`
/// with respect to the actor parameters, and that loss value.
pub(crate) fn actor_gradient(
    actor: &MlpParams,
    critic: &MlpParams,
    obs: &[f64],
    obs_dim: usize,
    n: usize,
) -> Result<(ParamGrads, f64)> {
    let act_dim = actor.output_dim();
    let actor_acts = actor.forward_batch(obs, n)?;
    let inputs = critic_inputs(obs, obs_dim, actor_acts.output(), act_dim, n);
    let critic_acts = critic.forward_batch(&inputs, n)?;
    let loss = -critic_acts.output().iter().sum::<f64>() / n as f64;
    let upstream = vec![-1.0 / n as f64; n];
    let input_grad = critic.input_grad_batch(&critic_acts, &upstream)?;
    let width = obs_dim + act_dim;
    let mut action_grad = Vec::with_capacity(n * act_dim);
    for b in 0..n {
        action_grad.extend_from_slice(&input_grad[b * width + obs_dim..(b + 1) * width]);
    }
    let (grads, _) = actor.backward_batch(&actor_acts, &action_grad, false)?;
    Ok((grads, loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_round_trip() {
        let s = ActionScale::from_space(&ActionSpace::Box { low: vec![-0.25, 0.0], high: vec![0.25, 2.0] }).unwrap();
        assert_eq!(s.to_env(&[1.0, -1.0]), vec![0.25, 0.0]);
        assert_eq!(s.to_env(&[0.0, 0.0]), vec![0.0, 1.0]);
        assert_eq!(s.to_unit(&[0.25, 2.0]), vec![1.0, 1.0]);
        assert_eq!(s.to_unit(&[9.0, -3.0]), vec![1.0, -1.0]);
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let actor = build_actor(3, &[5], 2, 1).unwrap();
        let critic = build_critic(3, &[6], 2, 2).unwrap();
        let obs = [0.3, -0.2, 0.9, -0.5, 0.1, 0.4];
        let (g, loss) = actor_gradient(&actor, &critic, &obs, 3, 2).unwrap();
        let objective = |a: &MlpParams| actor_gradient(a, &critic, &obs, 3, 2).unwrap().1;
        assert!((objective(&actor) - loss).abs() < 1e-15);
        let h = 1e-6;
        for l in 0..actor.layers.len() {
            for i in 0..actor.layers[l].weights.len() {
                let mut plus = actor.clone();
                plus.layers[l].weights[i] += h;
                let mut minus = actor.clone();
                minus.layers[l].weights[i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = g.layers[l].weights[i];
                assert!((fd - an).abs() < 1e-7, "layer {l} w{i}: fd {fd} analytic {an}");
            }
        }
    }
}
