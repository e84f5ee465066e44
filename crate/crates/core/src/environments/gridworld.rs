//! Grid World navigation split into vertical bands, one band per stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqlError};
use crate::staged_mdp::{
    Action, ActionSpace, FiniteStagedEnv, Outcome, SdqlRng, StagedEnv, StepOutcome,
};

pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
pub const N_ACTIONS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridWorldParams {
    pub rows: usize,
    pub cols: usize,
    /// Ascending column indices where a new stage begins.
    pub band_thresholds: Vec<usize>,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub goal_reward: f64,
    pub step_reward: f64,
}

impl Default for GridWorldParams {
    fn default() -> Self {
        Self {
            rows: 25,
            cols: 25,
            band_thresholds: vec![5, 10, 15, 20],
            start: (0, 0),
            goal: (24, 24),
            goal_reward: 1.0,
            step_reward: 0.0,
        }
    }
}

/// Cell `(row, col)`; row 0 is the top edge, column 0 the left edge.
pub type Cell = (usize, usize);

/// Moves are one cell up/down/left/right. Moving off the grid leaves the agent
/// in place, and so does a left move that would cross back over a stage
/// boundary, which keeps the stage index monotone along every trajectory.
#[derive(Clone, Debug)]
pub struct GridWorldEnv {
    params: GridWorldParams,
}

impl GridWorldEnv {
    pub fn new(params: GridWorldParams) -> Result<Self> {
        let p = &params;
        if p.rows == 0 || p.cols == 0 {
            return Err(SdqlError::InvalidConfig("environment.rows/cols must be positive".into()));
        }
        if p.rows * p.cols < 2 {
            return Err(SdqlError::InvalidConfig("grid needs at least two cells".into()));
        }
        if !p.band_thresholds.windows(2).all(|w| w[0] < w[1])
            || p.band_thresholds.iter().any(|&t| t == 0 || t >= p.cols)
        {
            return Err(SdqlError::InvalidConfig(format!(
                "environment.band_thresholds {:?} must be strictly ascending within 1..{}",
                p.band_thresholds, p.cols
            )));
        }
        for (name, c) in [("start", p.start), ("goal", p.goal)] {
            if c.0 >= p.rows || c.1 >= p.cols {
                return Err(SdqlError::InvalidConfig(format!(
                    "environment.{name} {c:?} lies outside the {}x{} grid",
                    p.rows, p.cols
                )));
            }
        }
        let env = Self { params };
        if env.stage_of(&env.params.goal) != env.n_stages() {
            return Err(SdqlError::InvalidConfig(
                "environment.goal must lie in the last band".into(),
            ));
        }
        if env.params.start == env.params.goal {
            return Err(SdqlError::InvalidConfig("environment.start equals the goal".into()));
        }
        Ok(env)
    }

    pub fn params(&self) -> &GridWorldParams {
        &self.params
    }

    pub fn rows(&self) -> usize {
        self.params.rows
    }

    pub fn cols(&self) -> usize {
        self.params.cols
    }

    /// Column range `[lo, hi)` of 1-based band `k`.
    pub fn band_columns(&self, k: usize) -> (usize, usize) {
        let t = &self.params.band_thresholds;
        let lo = if k == 1 { 0 } else { t[k - 2] };
        let hi = if k == self.n_stages() { self.params.cols } else { t[k - 1] };
        (lo, hi)
    }

    fn band_of_col(&self, col: usize) -> usize {
        1 + self.params.band_thresholds.iter().filter(|&&t| t <= col).count()
    }

    pub fn manhattan_to_goal(&self, cell: Cell) -> usize {
        cell.0.abs_diff(self.params.goal.0) + cell.1.abs_diff(self.params.goal.1)
    }

    /// Deterministic move of one cell.
    pub fn grid_step(&self, state: Cell, action: usize) -> (Cell, f64, bool) {
        let (r, c) = state;
        let next = match action {
            UP if r > 0 => (r - 1, c),
            DOWN if r + 1 < self.params.rows => (r + 1, c),
            LEFT if c > 0 && self.band_of_col(c - 1) == self.band_of_col(c) => (r, c - 1),
            RIGHT if c + 1 < self.params.cols => (r, c + 1),
            _ => (r, c),
        };
        let terminal = next == self.params.goal;
        let reward = if terminal { self.params.goal_reward } else { self.params.step_reward };
        (next, reward, terminal)
    }

    pub fn all_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        (0..self.params.rows).flat_map(move |r| (0..self.params.cols).map(move |c| (r, c)))
    }
}

impl StagedEnv for GridWorldEnv {
    type State = Cell;

    fn name(&self) -> &'static str {
        "gridworld"
    }

    fn n_stages(&self) -> usize {
        self.params.band_thresholds.len() + 1
    }

    /// One-hot row followed by one-hot column.
    fn obs_dim(&self) -> usize {
        self.params.rows + self.params.cols
    }

    fn observe(&self, state: &Cell) -> Vec<f64> {
        let mut obs = vec![0.0; self.obs_dim()];
        obs[state.0] = 1.0;
        obs[self.params.rows + state.1] = 1.0;
        obs
    }

    fn step(&self, state: &Cell, action: &Action, _rng: &mut SdqlRng) -> StepOutcome<Cell> {
        let a = action.as_discrete().expect("gridworld actions are discrete");
        let (next_state, reward, terminal) = self.grid_step(*state, a);
        StepOutcome {
            next_state,
            reward,
            terminal,
        }
    }

    fn stage_of(&self, state: &Cell) -> usize {
        self.band_of_col(state.1)
    }

    fn action_space(&self, _stage: usize) -> ActionSpace {
        ActionSpace::Discrete { n: N_ACTIONS }
    }

    fn sample_initial(&self, _rng: &mut SdqlRng) -> Cell {
        self.params.start
    }

    /// Uniform over the band's cells, the goal excluded.
    fn sample_initial_in_band(&self, k: usize, rng: &mut SdqlRng) -> Result<Cell> {
        let (lo, hi) = self.band_columns(k);
        loop {
            let cell = (rng.random_range(0..self.params.rows), rng.random_range(lo..hi));
            if cell != self.params.goal {
                return Ok(cell);
            }
        }
    }

    fn state_components(&self, state: &Cell) -> Vec<f64> {
        vec![state.0 as f64, state.1 as f64]
    }

    fn state_labels(&self) -> Vec<&'static str> {
        vec!["row", "col"]
    }
}

impl FiniteStagedEnv for GridWorldEnv {
    fn n_states(&self) -> usize {
        self.params.rows * self.params.cols
    }

    fn state_id(&self, state: &Cell) -> usize {
        state.0 * self.params.cols + state.1
    }

    fn state_from_id(&self, id: usize) -> Cell {
        (id / self.params.cols, id % self.params.cols)
    }

    fn is_terminal(&self, state: &Cell) -> bool {
        *state == self.params.goal
    }

    fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    fn outcomes(&self, state: &Cell, action: usize) -> Vec<Outcome<Cell>> {
        let (next_state, reward, terminal) = self.grid_step(*state, action);
        vec![Outcome {
            prob: 1.0,
            next_state,
            reward,
            terminal,
        }]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::staged_mdp::{detect_transition, reset_in_band, stage_index};
    use rand::SeedableRng;

    fn env() -> GridWorldEnv {
        GridWorldEnv::new(GridWorldParams::default()).unwrap()
    }

    #[test]
    fn stage_indices() {
        let e = env();
        assert_eq!(stage_index(&e, &(0, 0)), 1);
        assert_eq!(stage_index(&e, &(10, 24)), 5);
        assert_eq!(stage_index(&e, &(3, 5)), 2);
        assert_eq!(e.n_stages(), 5);
    }

    #[test]
    fn boundary_moves() {
        let e = env();
        assert_eq!(e.grid_step((0, 0), UP), ((0, 0), 0.0, false));
        assert_eq!(e.grid_step((0, 0), LEFT), ((0, 0), 0.0, false));
        assert_eq!(e.grid_step((24, 23), RIGHT), ((24, 24), 1.0, true));
        assert_eq!(e.grid_step((3, 4), RIGHT), ((3, 5), 0.0, false));
        // stage boundaries are one-way
        assert_eq!(e.grid_step((3, 5), LEFT), ((3, 5), 0.0, false));
        assert_eq!(e.grid_step((3, 6), LEFT), ((3, 5), 0.0, false));
    }

    #[test]
    fn transitions_detected() {
        let e = env();
        assert!(detect_transition(&e, &(3, 4), &(3, 5)).unwrap());
        assert!(!detect_transition(&e, &(3, 4), &(3, 4)).unwrap());
        assert!(matches!(
            detect_transition(&e, &(3, 4), &(3, 10)),
            Err(SdqlError::StageViolation { from: 1, to: 3 })
        ));
    }

    #[test]
    fn band_resets() {
        let e = env();
        let mut rng = SdqlRng::seed_from_u64(0);
        for k in 1..=5 {
            for _ in 0..1000 {
                let s = reset_in_band(&e, k, &mut rng).unwrap();
                assert_eq!(e.stage_of(&s), k);
                assert_ne!(s, e.params.goal);
            }
        }
        let s = reset_in_band(&e, 5, &mut rng).unwrap();
        assert!((20..=24).contains(&s.1));
        let s = reset_in_band(&e, 1, &mut rng).unwrap();
        assert!(s.1 <= 4);
        assert!(reset_in_band(&e, 0, &mut rng).is_err());
        assert!(reset_in_band(&e, 6, &mut rng).is_err());
    }

    #[test]
    fn one_hot_observation() {
        let e = env();
        let o = e.observe(&(2, 7));
        assert_eq!(o.len(), 50);
        assert_eq!(o.iter().sum::<f64>(), 2.0);
        assert_eq!(o[2], 1.0);
        assert_eq!(o[25 + 7], 1.0);
    }

    #[test]
    fn rejects_bad_geometry() {
        let bad = GridWorldParams {
            band_thresholds: vec![10, 5],
            ..Default::default()
        };
        assert!(GridWorldEnv::new(bad).is_err());
        let bad = GridWorldParams {
            goal: (24, 2),
            ..Default::default()
        };
        assert!(GridWorldEnv::new(bad).is_err());
    }
}
