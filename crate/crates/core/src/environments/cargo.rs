//! Two-robot cooperative cargo transport through an obstacle arena.
//!
//! A slider robot (heading control, fixed speed) carries the cargo across
//! the split line; a self-propelled robot (on/off propulsion, diffusing
//! heading) takes over and delivers it to the target. Both follow overdamped
//! Langevin dynamics integrated with Euler–Maruyama.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqlError};
use crate::staged_mdp::{Action, ActionSpace, SdqlRng, StagedEnv, StepOutcome, MAX_REJECTION_ATTEMPTS};

use super::manipulator::wrap_angle;

const DEFAULT_MAP: &str = include_str!("../../assets/cargo_default.map");

/// Side length of the square occupancy patch in an observation.
pub const PATCH: usize = 10;

/// Obstacle occupancy with unit cells. Row `r` covers `y ∈ [r, r + 1)`,
/// column `c` covers `x ∈ [c, c + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub rows: usize,
    pub cols: usize,
    cells: Vec<bool>,
}

impl OccupancyGrid {
    /// Parses `rows cols` followed by `rows` lines of `0`/`1` characters.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| SdqlError::InvalidConfig("obstacle map is empty".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| SdqlError::InvalidConfig(format!("obstacle map header {header:?}: {e}")))?;
        let [rows, cols] = dims[..] else {
            return Err(SdqlError::InvalidConfig(format!(
                "obstacle map header must be `rows cols`, got {header:?}"
            )));
        };
        if rows == 0 || cols == 0 {
            return Err(SdqlError::InvalidConfig("obstacle map must be non-empty".into()));
        }
        let mut cells = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let line = lines.next().ok_or_else(|| {
                SdqlError::InvalidConfig(format!("obstacle map has {r} rows, expected {rows}"))
            })?;
            let line = line.trim();
            if line.chars().count() != cols {
                return Err(SdqlError::InvalidConfig(format!(
                    "obstacle map row {r} has {} columns, expected {cols}",
                    line.chars().count()
                )));
            }
            for ch in line.chars() {
                match ch {
                    '0' => cells.push(false),
                    '1' => cells.push(true),
                    other => {
                        return Err(SdqlError::InvalidConfig(format!(
                            "obstacle map row {r}: unexpected character {other:?}"
                        )))
                    }
                }
            }
        }
        if lines.next().is_some() {
            return Err(SdqlError::InvalidConfig(format!(
                "obstacle map has more than {rows} rows"
            )));
        }
        Ok(Self { rows, cols, cells })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn bundled_default() -> Self {
        Self::parse(DEFAULT_MAP).expect("bundled obstacle map is valid")
    }

    /// Whether the integer cell is an obstacle or outside the arena.
    pub fn blocked_cell(&self, col: i64, row: i64) -> bool {
        if col < 0 || row < 0 || col >= self.cols as i64 || row >= self.rows as i64 {
            return true;
        }
        self.cells[row as usize * self.cols + col as usize]
    }

    pub fn is_free(&self, x: f64, y: f64) -> bool {
        x >= 0.0
            && y >= 0.0
            && x < self.cols as f64
            && y < self.rows as f64
            && !self.blocked_cell(x.floor() as i64, y.floor() as i64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CargoParams {
    /// Obstacle map file; the bundled layout is used when absent.
    pub map_file: Option<String>,
    /// Stage boundary `x = x_split`; defaults to the arena midline.
    pub x_split: Option<f64>,
    pub target: (f64, f64),
    pub v_const: f64,
    pub omega_max: f64,
    pub v_max: f64,
    pub d_t: f64,
    pub d_r: f64,
    pub dt: f64,
    pub capture_radius: f64,
    /// Evaluation start region `[x_lo, x_hi, y_lo, y_hi]`.
    pub start_region: [f64; 4],
}

impl Default for CargoParams {
    fn default() -> Self {
        Self {
            map_file: None,
            x_split: None,
            target: (35.0, 25.0),
            v_const: 2.0,
            omega_max: PI,
            v_max: 2.0,
            d_t: 0.02,
            d_r: 0.2,
            dt: 0.25,
            capture_radius: 1.0,
            start_region: [2.0, 8.0, 2.0, 48.0],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RobotKind {
    Slider,
    SelfPropelled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CargoState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub kind: RobotKind,
}

#[derive(Clone, Debug)]
pub struct CargoEnv {
    params: CargoParams,
    grid: OccupancyGrid,
    x_split: f64,
    diagonal: f64,
}

impl CargoEnv {
    pub fn new(params: CargoParams) -> Result<Self> {
        let grid = match &params.map_file {
            Some(path) => OccupancyGrid::load(Path::new(path))?,
            None => OccupancyGrid::bundled_default(),
        };
        Self::with_grid(params, grid)
    }

    pub fn with_grid(params: CargoParams, grid: OccupancyGrid) -> Result<Self> {
        let p = &params;
        let width = grid.cols as f64;
        let height = grid.rows as f64;
        let x_split = p.x_split.unwrap_or(width / 2.0);
        if !(x_split > 0.0 && x_split < width) {
            return Err(SdqlError::InvalidConfig(format!(
                "environment.x_split = {x_split} must lie inside the arena"
            )));
        }
        for (name, v) in [
            ("v_const", p.v_const),
            ("omega_max", p.omega_max),
            ("v_max", p.v_max),
            ("dt", p.dt),
            ("capture_radius", p.capture_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SdqlError::InvalidConfig(format!("environment.{name} = {v} must be positive")));
            }
        }
        for (name, v) in [("d_t", p.d_t), ("d_r", p.d_r)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SdqlError::InvalidConfig(format!("environment.{name} = {v} must be non-negative")));
            }
        }
        let (tx, ty) = p.target;
        if !grid.is_free(tx, ty) || tx <= x_split {
            return Err(SdqlError::InvalidConfig(format!(
                "environment.target {:?} must be a free cell beyond x_split",
                p.target
            )));
        }
        let [x_lo, x_hi, y_lo, y_hi] = p.start_region;
        if !(x_lo < x_hi && y_lo < y_hi && x_lo >= 0.0 && x_hi <= x_split && y_lo >= 0.0 && y_hi <= height) {
            return Err(SdqlError::InvalidConfig(format!(
                "environment.start_region {:?} must be a box inside the first stage",
                p.start_region
            )));
        }
        let diagonal = (width * width + height * height).sqrt();
        Ok(Self {
            params,
            grid,
            x_split,
            diagonal,
        })
    }

    pub fn params(&self) -> &CargoParams {
        &self.params
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    pub fn x_split(&self) -> f64 {
        self.x_split
    }

    pub fn distance_to_target(&self, x: f64, y: f64) -> f64 {
        let (tx, ty) = self.params.target;
        ((tx - x).powi(2) + (ty - y).powi(2)).sqrt()
    }

    /// One Euler–Maruyama step. `control` is the slider's turn command
    /// `w ∈ [-1, 1]` or the self-propelled robot's speed.
    pub fn cargo_step(&self, s: &CargoState, control: f64, rng: &mut SdqlRng) -> (CargoState, f64, bool) {
        let p = &self.params;
        let xi_x: f64 = rng.sample(StandardNormal);
        let xi_y: f64 = rng.sample(StandardNormal);
        let xi_theta: f64 = rng.sample(StandardNormal);
        let sigma_t = (2.0 * p.d_t * p.dt).sqrt();
        let sigma_r = (2.0 * p.d_r * p.dt).sqrt();

        let (speed, turn) = match s.kind {
            RobotKind::Slider => (p.v_const, control.clamp(-1.0, 1.0) * p.omega_max),
            RobotKind::SelfPropelled => (control, 0.0),
        };
        let theta = wrap_angle(s.theta + turn * p.dt + sigma_r * xi_theta);
        let mut x = s.x + speed * s.theta.cos() * p.dt + sigma_t * xi_x;
        let mut y = s.y + speed * s.theta.sin() * p.dt + sigma_t * xi_y;
        if !self.grid.is_free(x, y) {
            x = s.x;
            y = s.y;
        }
        let kind = if s.kind == RobotKind::Slider && x > self.x_split {
            RobotKind::SelfPropelled
        } else {
            s.kind
        };
        let terminal = self.distance_to_target(x, y) <= p.capture_radius;
        let reward = if terminal { 1.0 } else { 0.0 };
        (CargoState { x, y, theta, kind }, reward, terminal)
    }

    /// 10x10 occupancy patch around the robot followed by the target offset
    /// in the robot frame, scaled by the arena diagonal.
    pub fn cargo_observe(&self, s: &CargoState) -> Vec<f64> {
        let mut obs = Vec::with_capacity(PATCH * PATCH + 2);
        let cx = s.x.floor() as i64;
        let cy = s.y.floor() as i64;
        let half = (PATCH / 2) as i64;
        for dy in -half..half {
            for dx in -half..half {
                obs.push(if self.grid.blocked_cell(cx + dx, cy + dy) { 1.0 } else { 0.0 });
            }
        }
        let (tx, ty) = self.params.target;
        let (dx, dy) = (tx - s.x, ty - s.y);
        let (sin, cos) = s.theta.sin_cos();
        obs.push((dx * cos + dy * sin) / self.diagonal);
        obs.push((-dx * sin + dy * cos) / self.diagonal);
        obs
    }

    fn uniform_free(&self, x_range: (f64, f64), y_range: (f64, f64), rng: &mut SdqlRng) -> Result<(f64, f64)> {
        for _ in 0..MAX_REJECTION_ATTEMPTS {
            let x = rng.random_range(x_range.0..x_range.1);
            let y = rng.random_range(y_range.0..y_range.1);
            if self.grid.is_free(x, y) {
                return Ok((x, y));
            }
        }
        Err(SdqlError::InvalidConfig("cargo: no free cell in sampling region".into()))
    }

    fn random_heading(rng: &mut SdqlRng) -> f64 {
        wrap_angle(rng.random_range(-PI..PI))
    }
}

impl StagedEnv for CargoEnv {
    type State = CargoState;

    fn name(&self) -> &'static str {
        "cargo"
    }

    fn n_stages(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        PATCH * PATCH + 2
    }

    fn observe(&self, s: &CargoState) -> Vec<f64> {
        self.cargo_observe(s)
    }

    fn step(&self, s: &CargoState, action: &Action, rng: &mut SdqlRng) -> StepOutcome<CargoState> {
        let control = match (s.kind, action) {
            (RobotKind::Slider, Action::Continuous(w)) => w[0],
            (RobotKind::SelfPropelled, Action::Discrete(a)) => {
                if *a == 0 {
                    0.0
                } else {
                    self.params.v_max
                }
            }
            (kind, a) => panic!("action {a:?} does not fit robot {kind:?}"),
        };
        let (next_state, reward, terminal) = self.cargo_step(s, control, rng);
        StepOutcome {
            next_state,
            reward,
            terminal,
        }
    }

    fn stage_of(&self, s: &CargoState) -> usize {
        match s.kind {
            RobotKind::Slider => 1,
            RobotKind::SelfPropelled => 2,
        }
    }

    fn action_space(&self, stage: usize) -> ActionSpace {
        if stage == 1 {
            ActionSpace::symmetric_box(1.0, 1)
        } else {
            ActionSpace::Discrete { n: 2 }
        }
    }

    fn sample_initial(&self, rng: &mut SdqlRng) -> CargoState {
        let [x_lo, x_hi, y_lo, y_hi] = self.params.start_region;
        let (x, y) = self
            .uniform_free((x_lo, x_hi), (y_lo, y_hi), rng)
            .expect("start region has free cells");
        CargoState {
            x,
            y,
            theta: Self::random_heading(rng),
            kind: RobotKind::Slider,
        }
    }

    /// Uniform over the free part of the band with a uniform heading.
    fn sample_initial_in_band(&self, k: usize, rng: &mut SdqlRng) -> Result<CargoState> {
        let h = self.grid.rows as f64;
        match k {
            1 => {
                let (x, y) = self.uniform_free((0.0, self.x_split), (0.0, h), rng)?;
                Ok(CargoState { x, y, theta: Self::random_heading(rng), kind: RobotKind::Slider })
            }
            2 => {
                for _ in 0..MAX_REJECTION_ATTEMPTS {
                    let (x, y) = self.uniform_free((self.x_split, self.grid.cols as f64), (0.0, h), rng)?;
                    if x > self.x_split && self.distance_to_target(x, y) > self.params.capture_radius {
                        return Ok(CargoState {
                            x,
                            y,
                            theta: Self::random_heading(rng),
                            kind: RobotKind::SelfPropelled,
                        });
                    }
                }
                Err(SdqlError::InvalidConfig("cargo: stage-2 region has no free cells".into()))
            }
            _ => Err(SdqlError::InvalidConfig(format!("cargo has no band {k}"))),
        }
    }

    fn state_components(&self, s: &CargoState) -> Vec<f64> {
        vec![s.x, s.y, s.theta]
    }

    fn state_labels(&self) -> Vec<&'static str> {
        vec!["x", "y", "theta"]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::staged_mdp::reset_in_band;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use std::f64::consts::FRAC_PI_2;

    fn noiseless() -> CargoEnv {
        CargoEnv::new(CargoParams {
            d_t: 0.0,
            d_r: 0.0,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn parses_bundled_map() {
        let g = OccupancyGrid::bundled_default();
        assert_eq!((g.rows, g.cols), (50, 50));
        assert!(g.blocked_cell(11, 20));
        assert!(!g.blocked_cell(0, 0));
        assert!(g.blocked_cell(-1, 0));
        assert!(g.blocked_cell(0, 50));
    }

    #[test]
    fn rejects_malformed_maps() {
        assert!(OccupancyGrid::parse("").is_err());
        assert!(OccupancyGrid::parse("2 2\n00\n").is_err());
        assert!(OccupancyGrid::parse("2 2\n00\n0x\n").is_err());
        assert!(OccupancyGrid::parse("2 2\n000\n00\n").is_err());
        assert!(OccupancyGrid::parse("2\n00\n00\n").is_err());
        let g = OccupancyGrid::parse("2 3\n010\n000\n").unwrap();
        assert!(g.blocked_cell(1, 0));
        assert!(!g.is_free(1.5, 0.5));
        assert!(g.is_free(1.5, 1.5));
    }

    #[test]
    fn slider_straight_line() {
        let e = noiseless();
        let mut rng = SdqlRng::seed_from_u64(0);
        let s = CargoState { x: 5.0, y: 5.0, theta: 0.0, kind: RobotKind::Slider };
        let (n, r, t) = e.cargo_step(&s, 0.0, &mut rng);
        assert_eq!(n.x, 5.0 + 2.0 * 0.25);
        assert_eq!(n.y, 5.0);
        assert_eq!(n.theta, 0.0);
        assert_eq!((r, t), (0.0, false));
    }

    #[test]
    fn idle_self_propelled_robot_stays() {
        let e = noiseless();
        let mut rng = SdqlRng::seed_from_u64(0);
        let s = CargoState { x: 30.0, y: 5.0, theta: 1.0, kind: RobotKind::SelfPropelled };
        let (n, _, _) = e.cargo_step(&s, 0.0, &mut rng);
        assert_eq!(n, s);
    }

    #[test]
    fn obstacles_reject_position_but_not_heading() {
        let e = noiseless();
        let mut rng = SdqlRng::seed_from_u64(0);
        // obstacle occupies x in [10, 14)
        let s = CargoState { x: 9.8, y: 20.0, theta: 0.0, kind: RobotKind::Slider };
        let (n, _, _) = e.cargo_step(&s, 0.5, &mut rng);
        assert_eq!((n.x, n.y), (9.8, 20.0));
        assert_abs_diff_eq!(n.theta, 0.5 * PI * 0.25);
    }

    #[test]
    fn crossing_swaps_robot() {
        let e = noiseless();
        let mut rng = SdqlRng::seed_from_u64(0);
        let s = CargoState { x: 24.8, y: 5.0, theta: 0.0, kind: RobotKind::Slider };
        let (n, _, _) = e.cargo_step(&s, 0.0, &mut rng);
        assert_eq!(n.kind, RobotKind::SelfPropelled);
        assert_eq!(e.stage_of(&n), 2);
        // and stays the self-propelled robot when drifting back
        let back = CargoState { theta: PI, ..n };
        let (m, _, _) = e.cargo_step(&back, 2.0, &mut rng);
        assert!(m.x < e.x_split());
        assert_eq!(m.kind, RobotKind::SelfPropelled);
    }

    #[test]
    fn capture_is_terminal() {
        let e = noiseless();
        let mut rng = SdqlRng::seed_from_u64(0);
        let s = CargoState { x: 33.7, y: 25.0, theta: 0.0, kind: RobotKind::SelfPropelled };
        let (_, r, t) = e.cargo_step(&s, 2.0, &mut rng);
        assert_eq!((r, t), (1.0, true));
    }

    #[test]
    fn observation_layout() {
        let e = noiseless();
        let s = CargoState { x: 30.5, y: 25.5, theta: 0.0, kind: RobotKind::SelfPropelled };
        let o = e.observe(&s);
        assert_eq!(o.len(), 102);
        assert!(o[..100].iter().all(|&v| v == 0.0));
        let diag = (50.0f64 * 50.0 * 2.0).sqrt();
        assert_abs_diff_eq!(o[100], 4.5 / diag, epsilon = 1e-15);
        assert_abs_diff_eq!(o[101], -0.5 / diag, epsilon = 1e-15);

        // heading north with the target straight north
        let s = CargoState { x: 35.0, y: 15.0, theta: FRAC_PI_2, kind: RobotKind::SelfPropelled };
        let o = e.observe(&s);
        assert_abs_diff_eq!(o[100], 10.0 / diag, epsilon = 1e-12);
        assert_abs_diff_eq!(o[101], 0.0, epsilon = 1e-12);

        // corner: walls fill the out-of-arena part of the patch
        let s = CargoState { x: 0.5, y: 0.5, theta: 0.0, kind: RobotKind::Slider };
        let o = e.observe(&s);
        assert_eq!(o[0], 1.0);
        assert_eq!(o[5 * PATCH + 5], 0.0);
    }

    #[test]
    fn band_resets() {
        let e = CargoEnv::new(CargoParams::default()).unwrap();
        let mut rng = SdqlRng::seed_from_u64(9);
        for k in 1..=2 {
            for _ in 0..1000 {
                let s = reset_in_band(&e, k, &mut rng).unwrap();
                assert_eq!(e.stage_of(&s), k);
                assert!(e.grid().is_free(s.x, s.y));
                assert_eq!(s.x > e.x_split(), k == 2);
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let bad = CargoParams { target: (11.0, 20.0), ..Default::default() };
        assert!(CargoEnv::new(bad).is_err());
        let bad = CargoParams { dt: 0.0, ..Default::default() };
        assert!(CargoEnv::new(bad).is_err());
        let bad = CargoParams { start_region: [20.0, 30.0, 0.0, 10.0], ..Default::default() };
        assert!(CargoEnv::new(bad).is_err());
    }
}
