//! Two-link planar arm reaching a target with high precision.
//!
//! Stage 1 moves the arm coarsely; once the end effector comes within
//! `stage_boundary` of the target the task switches to stage 2, which uses a
//! smaller action bound and a finer distance normalization. The stage is
//! latched in the state so it never reverts.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqlError};
use crate::staged_mdp::{Action, ActionSpace, SdqlRng, StagedEnv, StepOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManipulatorParams {
    pub l1: f64,
    pub l2: f64,
    pub target: (f64, f64),
    pub success_radius: f64,
    pub stage_boundary: f64,
    /// Maximum joint increment per step in stage 1 and stage 2.
    pub u_max: [f64; 2],
    /// Divisor applied to the target offset in the observation, per stage.
    pub distance_norm: [f64; 2],
    pub obs_clip: f64,
}

impl Default for ManipulatorParams {
    fn default() -> Self {
        Self {
            l1: 1.0,
            l2: 1.0,
            target: (1.0, 1.0),
            success_radius: 0.01,
            stage_boundary: 0.2,
            u_max: [0.25, 0.05],
            distance_norm: [1.0, 0.05],
            obs_clip: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmState {
    pub theta1: f64,
    pub theta2: f64,
    pub stage: usize,
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    PI - (PI - a).rem_euclid(2.0 * PI)
}

/// Elbow and end-effector positions `(x1, y1, x2, y2)`.
pub fn forward_kinematics(l1: f64, l2: f64, theta1: f64, theta2: f64) -> (f64, f64, f64, f64) {
    let x1 = l1 * theta1.cos();
    let y1 = l1 * theta1.sin();
    let x2 = x1 + l2 * (theta1 + theta2).cos();
    let y2 = y1 + l2 * (theta1 + theta2).sin();
    (x1, y1, x2, y2)
}

/// Both joint solutions placing the end effector at `(x, y)`, if reachable.
pub fn inverse_kinematics(l1: f64, l2: f64, x: f64, y: f64) -> Option<[(f64, f64); 2]> {
    let c2 = (x * x + y * y - l1 * l1 - l2 * l2) / (2.0 * l1 * l2);
    if !(-1.0..=1.0).contains(&c2) {
        return None;
    }
    let sol = |s2: f64| {
        let t2 = s2.atan2(c2);
        let t1 = y.atan2(x) - (l2 * s2).atan2(l1 + l2 * c2);
        (wrap_angle(t1), wrap_angle(t2))
    };
    let s2 = (1.0 - c2 * c2).max(0.0).sqrt();
    Some([sol(s2), sol(-s2)])
}

#[derive(Clone, Debug)]
pub struct ManipulatorEnv {
    params: ManipulatorParams,
}

impl ManipulatorEnv {
    pub fn new(params: ManipulatorParams) -> Result<Self> {
        let p = &params;
        let positive = [
            ("l1", p.l1),
            ("l2", p.l2),
            ("success_radius", p.success_radius),
            ("stage_boundary", p.stage_boundary),
            ("u_max[0]", p.u_max[0]),
            ("u_max[1]", p.u_max[1]),
            ("distance_norm[0]", p.distance_norm[0]),
            ("distance_norm[1]", p.distance_norm[1]),
            ("obs_clip", p.obs_clip),
        ];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(SdqlError::InvalidConfig(format!("environment.{name} = {v} must be positive")));
        }
        if p.success_radius >= p.stage_boundary {
            return Err(SdqlError::InvalidConfig(
                "environment.success_radius must be smaller than stage_boundary".into(),
            ));
        }
        let reach = (p.target.0 * p.target.0 + p.target.1 * p.target.1).sqrt();
        if reach > p.l1 + p.l2 || reach < (p.l1 - p.l2).abs() {
            return Err(SdqlError::InvalidConfig(format!(
                "environment.target {:?} is out of reach",
                p.target
            )));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &ManipulatorParams {
        &self.params
    }

    pub fn fk(&self, theta1: f64, theta2: f64) -> (f64, f64, f64, f64) {
        forward_kinematics(self.params.l1, self.params.l2, theta1, theta2)
    }

    pub fn distance(&self, theta1: f64, theta2: f64) -> f64 {
        let (_, _, x2, y2) = self.fk(theta1, theta2);
        let (xt, yt) = self.params.target;
        ((xt - x2).powi(2) + (yt - y2).powi(2)).sqrt()
    }

    /// Stage a configuration would have if it were a fresh start.
    pub fn stage_for_configuration(&self, theta1: f64, theta2: f64) -> usize {
        if self.distance(theta1, theta2) < self.params.stage_boundary {
            2
        } else {
            1
        }
    }

    pub fn state_at(&self, theta1: f64, theta2: f64) -> ArmState {
        let (theta1, theta2) = (wrap_angle(theta1), wrap_angle(theta2));
        ArmState {
            theta1,
            theta2,
            stage: self.stage_for_configuration(theta1, theta2),
        }
    }

    pub fn arm_step(&self, state: &ArmState, u: &[f64]) -> (ArmState, f64, bool) {
        let bound = self.params.u_max[state.stage - 1];
        let u1 = u[0].clamp(-bound, bound);
        let u2 = u[1].clamp(-bound, bound);
        let theta1 = wrap_angle(state.theta1 + u1);
        let theta2 = wrap_angle(state.theta2 + u2);
        let d = self.distance(theta1, theta2);
        let stage = if d < self.params.stage_boundary { 2 } else { state.stage };
        let terminal = d <= self.params.success_radius;
        let reward = if terminal { 1.0 } else { 0.0 };
        (ArmState { theta1, theta2, stage }, reward, terminal)
    }

    fn uniform_config(&self, rng: &mut SdqlRng) -> (f64, f64) {
        let draw = |rng: &mut SdqlRng| wrap_angle(rng.random_range(-PI..PI));
        (draw(rng), draw(rng))
    }
}

impl StagedEnv for ManipulatorEnv {
    type State = ArmState;

    fn name(&self) -> &'static str {
        "manipulator"
    }

    fn n_stages(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        6
    }

    /// `(x1, y1, x2, y2, dx, dy)` with the target offset scaled per stage.
    fn observe(&self, s: &ArmState) -> Vec<f64> {
        let (x1, y1, x2, y2) = self.fk(s.theta1, s.theta2);
        let (xt, yt) = self.params.target;
        let norm = self.params.distance_norm[s.stage - 1];
        let clip = self.params.obs_clip;
        vec![
            x1,
            y1,
            x2,
            y2,
            ((xt - x2) / norm).clamp(-clip, clip),
            ((yt - y2) / norm).clamp(-clip, clip),
        ]
    }

    fn step(&self, s: &ArmState, action: &Action, _rng: &mut SdqlRng) -> StepOutcome<ArmState> {
        let u = action.as_continuous().expect("manipulator actions are continuous");
        let (next_state, reward, terminal) = self.arm_step(s, u);
        StepOutcome {
            next_state,
            reward,
            terminal,
        }
    }

    fn stage_of(&self, s: &ArmState) -> usize {
        s.stage
    }

    fn action_space(&self, stage: usize) -> ActionSpace {
        ActionSpace::symmetric_box(self.params.u_max[stage - 1], 2)
    }

    /// Uniform joint angles outside the stage-2 region.
    fn sample_initial(&self, rng: &mut SdqlRng) -> ArmState {
        loop {
            let (t1, t2) = self.uniform_config(rng);
            if self.distance(t1, t2) >= self.params.stage_boundary {
                return ArmState { theta1: t1, theta2: t2, stage: 1 };
            }
        }
    }

    fn sample_initial_in_band(&self, k: usize, rng: &mut SdqlRng) -> Result<ArmState> {
        match k {
            1 => Ok(self.sample_initial(rng)),
            2 => {
                for _ in 0..crate::staged_mdp::MAX_REJECTION_ATTEMPTS {
                    let (t1, t2) = self.uniform_config(rng);
                    let d = self.distance(t1, t2);
                    if d < self.params.stage_boundary && d > self.params.success_radius {
                        return Ok(ArmState { theta1: t1, theta2: t2, stage: 2 });
                    }
                }
                Err(SdqlError::InvalidConfig("manipulator: stage-2 region not found".into()))
            }
            _ => Err(SdqlError::InvalidConfig(format!("manipulator has no band {k}"))),
        }
    }

    fn state_components(&self, s: &ArmState) -> Vec<f64> {
        let (_, _, x2, y2) = self.fk(s.theta1, s.theta2);
        vec![s.theta1, s.theta2, x2, y2]
    }

    fn state_labels(&self) -> Vec<&'static str> {
        vec!["theta1", "theta2", "x", "y"]
    }
}
