//! Stage structure on top of an ordinary episodic MDP.
//!
//! A task with `N` stages carries nested state subsets `S_1 ⊂ S_2 ⊂ … ⊂ S_N`.
//! The stage index of a state is the smallest `i` with the state in `S_i`;
//! along any trajectory it only ever grows by one at a time, and terminal
//! states belong to the last stage.

use std::fmt::Debug;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqlError};

/// The single random stream type used by environments, modules and trainers.
pub type SdqlRng = ChaCha8Rng;

/// Cap on rejection-sampling attempts when drawing a start state inside a band.
pub const MAX_REJECTION_ATTEMPTS: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub n_stages: usize,
    /// Discount factor of each stage, first stage first.
    pub discounts: Vec<f64>,
    pub max_steps: usize,
}

impl StageSpec {
    pub fn homogeneous(n_stages: usize, gamma: f64, max_steps: usize) -> Self {
        Self {
            n_stages,
            discounts: vec![gamma; n_stages],
            max_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_stages == 0 {
            return Err(SdqlError::InvalidConfig("stages.n_stages must be at least 1".into()));
        }
        if self.discounts.len() != self.n_stages {
            return Err(SdqlError::InvalidConfig(format!(
                "stages.discounts has {} entries but n_stages is {}",
                self.discounts.len(),
                self.n_stages
            )));
        }
        if let Some((i, g)) = self
            .discounts
            .iter()
            .enumerate()
            .find(|(_, g)| !(**g > 0.0 && **g < 1.0))
        {
            return Err(SdqlError::InvalidConfig(format!(
                "stages.discounts[{i}] = {g} must lie in (0, 1)"
            )));
        }
        if self.max_steps == 0 {
            return Err(SdqlError::InvalidConfig("stages.max_steps must be positive".into()));
        }
        Ok(())
    }

    /// Discount of 1-based `stage`.
    pub fn gamma(&self, stage: usize) -> f64 {
        self.discounts[stage - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete { n: usize },
    Box { low: Vec<f64>, high: Vec<f64> },
}

impl ActionSpace {
    pub fn symmetric_box(bound: f64, dim: usize) -> Self {
        ActionSpace::Box {
            low: vec![-bound; dim],
            high: vec![bound; dim],
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete { .. })
    }

    /// Number of discrete actions, or the dimension of a box.
    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Discrete { n } => *n,
            ActionSpace::Box { low, .. } => low.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ActionSpace::Discrete { n } if *n < 2 => Err(SdqlError::InvalidConfig(format!(
                "a discrete action space needs at least 2 actions, got {n}"
            ))),
            ActionSpace::Box { low, high }
                if low.is_empty()
                    || low.len() != high.len()
                    || low.iter().zip(high).any(|(l, h)| !(l < h)) =>
            {
                Err(SdqlError::InvalidConfig(format!(
                    "box action space needs low < high componentwise, got {low:?} / {high:?}"
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    pub fn components(&self) -> Vec<f64> {
        match self {
            Action::Discrete(a) => vec![*a as f64],
            Action::Continuous(v) => v.clone(),
        }
    }

    pub fn as_discrete(&self) -> Option<usize> {
        match self {
            Action::Discrete(a) => Some(*a),
            Action::Continuous(_) => None,
        }
    }

    pub fn as_continuous(&self) -> Option<&[f64]> {
        match self {
            Action::Continuous(v) => Some(v),
            Action::Discrete(_) => None,
        }
    }
}

/// One experience tuple. `reward` already includes any stage-transition bonus.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state_obs: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state_obs: Vec<f64>,
    pub terminal: bool,
    pub stage_transitioned: bool,
    pub stage: usize,
}

impl Transition {
    /// Whether the learning target for this tuple is the stored reward alone.
    pub fn truncates(&self) -> bool {
        self.terminal || self.stage_transitioned
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome<S> {
    pub next_state: S,
    pub reward: f64,
    pub terminal: bool,
}

/// An environment with a linear stage structure. Stages are 1-based.
pub trait StagedEnv {
    type State: Clone + Debug;

    fn name(&self) -> &'static str;

    fn n_stages(&self) -> usize;

    /// Length of every observation vector.
    fn obs_dim(&self) -> usize;

    fn observe(&self, state: &Self::State) -> Vec<f64>;

    fn step(&self, state: &Self::State, action: &Action, rng: &mut SdqlRng) -> StepOutcome<Self::State>;

    fn stage_of(&self, state: &Self::State) -> usize;

    fn action_space(&self, stage: usize) -> ActionSpace;

    /// Draw from the task's natural start distribution (used for evaluation).
    fn sample_initial(&self, rng: &mut SdqlRng) -> Self::State;

    /// Draw a start state whose stage index is exactly `k`.
    ///
    /// The default rejects draws from [`StagedEnv::sample_initial`] until one
    /// lands in the band.
    fn sample_initial_in_band(&self, k: usize, rng: &mut SdqlRng) -> Result<Self::State> {
        for _ in 0..MAX_REJECTION_ATTEMPTS {
            let s = self.sample_initial(rng);
            if self.stage_of(&s) == k {
                return Ok(s);
            }
        }
        Err(SdqlError::InvalidConfig(format!(
            "{}: no start state found in band {k}",
            self.name()
        )))
    }

    /// Raw state components, used for trajectory export.
    fn state_components(&self, state: &Self::State) -> Vec<f64>;

    /// Column names for [`StagedEnv::state_components`].
    fn state_labels(&self) -> Vec<&'static str>;
}

/// One possible successor of a state-action pair in a finite environment.
#[derive(Clone, Debug)]
pub struct Outcome<S> {
    pub prob: f64,
    pub next_state: S,
    pub reward: f64,
    pub terminal: bool,
}

/// A staged environment with enumerable states and discrete actions, used by
/// the exact tabular solvers.
pub trait FiniteStagedEnv: StagedEnv {
    fn n_states(&self) -> usize;

    fn state_id(&self, state: &Self::State) -> usize;

    fn state_from_id(&self, id: usize) -> Self::State;

    /// Terminal states are absorbing and carry no further value.
    fn is_terminal(&self, state: &Self::State) -> bool;

    fn n_actions(&self) -> usize;

    fn outcomes(&self, state: &Self::State, action: usize) -> Vec<Outcome<Self::State>>;
}

/// Smallest `i` with `state ∈ S_i`.
pub fn stage_index<E: StagedEnv + ?Sized>(env: &E, state: &E::State) -> usize {
    env.stage_of(state)
}

/// Whether `s -> s_next` moves the system into the next stage.
///
/// Any other change of stage index is a structural violation.
pub fn detect_transition<E: StagedEnv + ?Sized>(env: &E, s: &E::State, s_next: &E::State) -> Result<bool> {
    let from = env.stage_of(s);
    let to = env.stage_of(s_next);
    if to == from {
        Ok(false)
    } else if to == from + 1 {
        Ok(true)
    } else {
        Err(SdqlError::StageViolation { from, to })
    }
}

/// Stage-modified reward: on a stage transition the discounted value of the
/// next stage at the entry state is added to the base reward.
pub fn staged_reward(base_reward: f64, transitioned: bool, gamma: f64, v_next: f64) -> Result<f64> {
    if !transitioned {
        return Ok(base_reward);
    }
    if !v_next.is_finite() {
        return Err(SdqlError::Numeric(format!(
            "next-stage value {v_next} is not finite"
        )));
    }
    Ok(base_reward + gamma * v_next)
}

/// Start state inside the band `S_k − S_{k−1}`.
pub fn reset_in_band<E: StagedEnv + ?Sized>(env: &E, k: usize, rng: &mut SdqlRng) -> Result<E::State> {
    if k == 0 || k > env.n_stages() {
        return Err(SdqlError::InvalidConfig(format!(
            "band {k} outside 1..={} for {}",
            env.n_stages(),
            env.name()
        )));
    }
    let s = env.sample_initial_in_band(k, rng)?;
    let got = env.stage_of(&s);
    if got != k {
        return Err(SdqlError::StageViolation { from: k, to: got });
    }
    Ok(s)
}
