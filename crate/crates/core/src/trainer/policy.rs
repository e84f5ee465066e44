use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqlError};
use crate::rl_modules::{ModuleConfig, QModule, StageModule};
use crate::staged_mdp::{detect_transition, staged_reward, Action, SdqlRng, StageSpec, StagedEnv, Transition};

/// One module per stage plus the stage layout they were trained for.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedPolicy {
    pub modules: Vec<StageModule>,
    pub stages: StageSpec,
}

impl StackedPolicy {
    /// Builds untrained modules, checking each against the stage's action space.
    pub fn build<E: StagedEnv>(env: &E, stages: &StageSpec, configs: &[ModuleConfig], seeds: &[u64]) -> Result<Self> {
        stages.validate()?;
        if env.n_stages() != stages.n_stages {
            return Err(SdqlError::InvalidConfig(format!(
                "stages.n_stages = {} but {} has {} stages",
                stages.n_stages,
                env.name(),
                env.n_stages()
            )));
        }
        if configs.len() != stages.n_stages || seeds.len() != stages.n_stages {
            return Err(SdqlError::InvalidConfig(format!(
                "{} module configs for {} stages",
                configs.len(),
                stages.n_stages
            )));
        }
        let modules = configs
            .iter()
            .zip(seeds)
            .enumerate()
            .map(|(i, (c, &seed))| {
                StageModule::build(c, env.obs_dim(), &env.action_space(i + 1), seed).map_err(|e| match e {
                    SdqlError::InvalidConfig(msg) => SdqlError::InvalidConfig(format!("modules[{i}]: {msg}")),
                    other => other,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            modules,
            stages: stages.clone(),
        })
    }

    pub fn n_stages(&self) -> usize {
        self.modules.len()
    }

    pub fn module(&self, stage: usize) -> &StageModule {
        &self.modules[stage - 1]
    }

    pub fn module_mut(&mut self, stage: usize) -> &mut StageModule {
        &mut self.modules[stage - 1]
    }

    /// Greedy action of the module owning the state's stage.
    pub fn greedy_action<E: StagedEnv>(&self, env: &E, state: &E::State) -> Action {
        self.module(env.stage_of(state)).greedy_action(&env.observe(state))
    }
}

/// Piecewise value: the value of the module owning the state's stage.
pub fn merged_value<E: StagedEnv>(policy: &StackedPolicy, env: &E, state: &E::State) -> f64 {
    policy.module(env.stage_of(state)).value(&env.observe(state))
}

/// Advances one environment step with the current stage's module and
/// returns the stage-tagged transition with its modified reward.
pub fn collect_step<E: StagedEnv>(
    policy: &mut StackedPolicy,
    env: &E,
    state: &E::State,
    explore: bool,
    rng: &mut SdqlRng,
) -> Result<(Transition, E::State)> {
    let stage = env.stage_of(state);
    let obs = env.observe(state);
    let action = policy.module_mut(stage).act(&obs, explore, rng);
    let out = env.step(state, &action, rng);
    let moved = detect_transition(env, state, &out.next_state)?;
    let transitioned = moved && !out.terminal;
    let next_obs = env.observe(&out.next_state);
    let v_next = if transitioned { policy.module(stage + 1).value(&next_obs) } else { 0.0 };
    let reward = staged_reward(out.reward, transitioned, policy.stages.gamma(stage), v_next)?;
    let t = Transition {
        state_obs: obs,
        action,
        reward,
        next_state_obs: next_obs,
        terminal: out.terminal,
        stage_transitioned: transitioned,
        stage,
    };
    Ok((t, out.next_state))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step: usize,
    pub stage: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Environment reward without any stage bonus.
    pub reward: f64,
    pub cumulative: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub final_state: Vec<f64>,
    pub final_stage: usize,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Index of the first step taken after a stage change, if any.
    pub fn first_transition(&self) -> Option<usize> {
        let first = self.steps.first()?.stage;
        self.steps
            .iter()
            .position(|s| s.stage != first)
            .or_else(|| (self.final_stage != first).then_some(self.steps.len()))
    }

    pub fn return_(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.cumulative)
    }
}

/// Greedy rollout from `start` for at most `max_steps` steps.
pub fn rollout<E: StagedEnv>(
    policy: &StackedPolicy,
    env: &E,
    start: E::State,
    max_steps: usize,
    rng: &mut SdqlRng,
) -> Result<Trajectory> {
    let mut state = start;
    let mut steps = Vec::new();
    let mut cumulative = 0.0;
    let mut success = false;
    for step in 0..max_steps {
        let stage = env.stage_of(&state);
        let action = policy.greedy_action(env, &state);
        let out = env.step(&state, &action, rng);
        detect_transition(env, &state, &out.next_state)?;
        cumulative += out.reward;
        steps.push(TrajectoryStep {
            step,
            stage,
            state: env.state_components(&state),
            action: action.components(),
            reward: out.reward,
            cumulative,
        });
        state = out.next_state;
        if out.terminal {
            success = true;
            break;
        }
    }
    Ok(Trajectory {
        steps,
        final_state: env.state_components(&state),
        final_stage: env.stage_of(&state),
        success,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub episodes: usize,
    pub success_rate: f64,
    /// Mean episode length; failed episodes count with their full length.
    pub mean_steps: f64,
    pub mean_return: f64,
    /// Mean number of steps spent in each stage per episode.
    pub per_stage_steps: Vec<f64>,
}

/// Greedy episodes from the task's natural start distribution.
pub fn evaluate<E: StagedEnv>(
    policy: &StackedPolicy,
    env: &E,
    n_episodes: usize,
    rng: &mut SdqlRng,
) -> Result<(EvalStats, Vec<Trajectory>)> {
    if n_episodes == 0 {
        return Err(SdqlError::InvalidConfig("evaluation needs at least one episode".into()));
    }
    let n = env.n_stages();
    let mut trajectories = Vec::with_capacity(n_episodes);
    let (mut successes, mut steps, mut ret) = (0usize, 0usize, 0.0);
    let mut per_stage = vec![0.0; n];
    for _ in 0..n_episodes {
        let start = env.sample_initial(rng);
        let tr = rollout(policy, env, start, policy.stages.max_steps, rng)?;
        successes += tr.success as usize;
        steps += tr.len();
        ret += tr.return_();
        for s in &tr.steps {
            per_stage[s.stage - 1] += 1.0;
        }
        trajectories.push(tr);
    }
    let m = n_episodes as f64;
    let stats = EvalStats {
        episodes: n_episodes,
        success_rate: successes as f64 / m,
        mean_steps: steps as f64 / m,
        mean_return: ret / m,
        per_stage_steps: per_stage.into_iter().map(|c| c / m).collect(),
    };
    Ok((stats, trajectories))
}
