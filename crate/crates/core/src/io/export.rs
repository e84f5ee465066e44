//! CSV export of evaluation trajectories and merged value maps.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use crate::environments::cargo::{CargoState, RobotKind};
use crate::error::{Result, SdqlError};
use crate::staged_mdp::{ActionSpace, StagedEnv};
use crate::trainer::{merged_value, StackedPolicy, Trajectory};

use super::config::BuiltEnv;

/// Action column names wide enough for every stage's action space.
pub fn action_labels<E: StagedEnv>(env: &E) -> Vec<String> {
    let width = (1..=env.n_stages())
        .map(|k| match env.action_space(k) {
            ActionSpace::Discrete { .. } => 1,
            ActionSpace::Box { low, .. } => low.len(),
        })
        .max()
        .unwrap_or(1);
    if width == 1 {
        vec!["action".into()]
    } else {
        (0..width).map(|i| format!("action_{i}")).collect()
    }
}

/// One row per step; shorter actions are padded with empty cells.
pub fn trajectories_csv<E: StagedEnv>(env: &E, trajectories: &[Trajectory]) -> String {
    let actions = action_labels(env);
    let mut out = String::from("episode,step,stage");
    for l in env.state_labels() {
        out.push(',');
        out.push_str(l);
    }
    for l in &actions {
        out.push(',');
        out.push_str(l);
    }
    out.push_str(",reward,cumulative_return\n");
    for (episode, t) in trajectories.iter().enumerate() {
        for s in &t.steps {
            write!(out, "{episode},{},{}", s.step, s.stage).unwrap();
            for v in &s.state {
                write!(out, ",{v}").unwrap();
            }
            for i in 0..actions.len() {
                match s.action.get(i) {
                    Some(v) => write!(out, ",{v}").unwrap(),
                    None => out.push(','),
                }
            }
            writeln!(out, ",{},{}", s.reward, s.cumulative).unwrap();
        }
    }
    out
}

/// Merged value `V(s) = V_{stage(s)}(s)` sampled on a rectangular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueGrid {
    pub row_label: &'static str,
    pub col_label: &'static str,
    pub row_centers: Vec<f64>,
    pub col_centers: Vec<f64>,
    /// Row-major; `NaN` marks cells with no defined state.
    pub values: Vec<f64>,
}

impl ValueGrid {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.col_centers.len() + col]
    }

    /// First cell holds `row\col`, the first row the column centers and the
    /// first column the row centers.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\\{}", self.row_label, self.col_label);
        for c in &self.col_centers {
            write!(out, ",{c}").unwrap();
        }
        out.push('\n');
        for (i, r) in self.row_centers.iter().enumerate() {
            write!(out, "{r}").unwrap();
            for j in 0..self.col_centers.len() {
                write!(out, ",{}", self.get(i, j)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn centers(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / n as f64;
    (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect()
}

/// Value map of `policy` over the environment's natural 2-D slice.
///
/// Gridworld uses every cell and ignores `resolution`; the goal cell is 0.
/// The manipulator uses a `resolution`² joint-angle grid. Cargo uses a
/// `resolution`² grid over the arena at heading `theta`, with `NaN` in
/// obstacle cells.
pub fn value_grid(policy: &StackedPolicy, env: &BuiltEnv, resolution: usize, theta: f64) -> Result<ValueGrid> {
    if resolution == 0 {
        return Err(SdqlError::InvalidConfig("grid resolution must be positive".into()));
    }
    Ok(match env {
        BuiltEnv::Gridworld(e) => {
            let (rows, cols) = (e.rows(), e.cols());
            let mut values = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    values.push(if (r, c) == e.params().goal { 0.0 } else { merged_value(policy, e, &(r, c)) });
                }
            }
            ValueGrid {
                row_label: "row",
                col_label: "col",
                row_centers: (0..rows).map(|r| r as f64).collect(),
                col_centers: (0..cols).map(|c| c as f64).collect(),
                values,
            }
        }
        BuiltEnv::Manipulator(e) => {
            let axis = centers(-PI, PI, resolution);
            let mut values = Vec::with_capacity(resolution * resolution);
            for &t1 in &axis {
                for &t2 in &axis {
                    values.push(merged_value(policy, e, &e.state_at(t1, t2)));
                }
            }
            ValueGrid {
                row_label: "theta1",
                col_label: "theta2",
                row_centers: axis.clone(),
                col_centers: axis,
                values,
            }
        }
        BuiltEnv::Cargo(e) => {
            let xs = centers(0.0, e.grid().cols as f64, resolution);
            let ys = centers(0.0, e.grid().rows as f64, resolution);
            let mut values = Vec::with_capacity(resolution * resolution);
            for &y in &ys {
                for &x in &xs {
                    let kind = if x > e.x_split() { RobotKind::SelfPropelled } else { RobotKind::Slider };
                    values.push(if e.grid().is_free(x, y) {
                        merged_value(policy, e, &CargoState { x, y, theta, kind })
                    } else {
                        f64::NAN
                    });
                }
            }
            ValueGrid {
                row_label: "y",
                col_label: "x",
                row_centers: ys,
                col_centers: xs,
                values,
            }
        }
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::gridworld::{GridWorldEnv, GridWorldParams};
    use crate::environments::{CargoEnv, CargoParams};
    use crate::rl_modules::{DdpgConfig, DqnConfig, ModuleConfig, TabularConfig};
    use crate::staged_mdp::{SdqlRng, StageSpec};
    use crate::trainer::evaluate;
    use rand::SeedableRng;

    fn grid() -> GridWorldEnv {
        GridWorldEnv::new(GridWorldParams {
            rows: 3,
            cols: 4,
            band_thresholds: vec![2],
            goal: (2, 3),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn trajectory_csv_layout() {
        let env = grid();
        let configs = vec![ModuleConfig::Tabular(TabularConfig::default()); 2];
        let policy = StackedPolicy::build(&env, &StageSpec::homogeneous(2, 0.9, 3), &configs, &[0, 1]).unwrap();
        let (_, ts) = evaluate(&policy, &env, 2, &mut SdqlRng::seed_from_u64(0)).unwrap();
        let csv = trajectories_csv(&env, &ts);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "episode,step,stage,row,col,action,reward,cumulative_return");
        assert_eq!(lines.len(), 1 + ts.iter().map(Trajectory::len).sum::<usize>());
        assert!(lines[1].starts_with("0,0,1,0,0,"));
        assert!(lines.iter().all(|l| l.split(',').count() == 8));
    }

    #[test]
    fn mixed_action_widths_are_padded() {
        let env = CargoEnv::new(CargoParams::default()).unwrap();
        assert_eq!(action_labels(&env), vec!["action"]);
        let arm = crate::environments::ManipulatorEnv::new(Default::default()).unwrap();
        assert_eq!(action_labels(&arm), vec!["action_0", "action_1"]);
    }

    #[test]
    fn gridworld_value_grid_shape() {
        let env = grid();
        let configs = vec![ModuleConfig::Dqn(DqnConfig { hidden: vec![4], ..Default::default() }); 2];
        let policy = StackedPolicy::build(&env, &StageSpec::homogeneous(2, 0.9, 3), &configs, &[0, 1]).unwrap();
        let g = value_grid(&policy, &BuiltEnv::Gridworld(env.clone()), 7, 0.0).unwrap();
        assert_eq!((g.row_centers.len(), g.col_centers.len()), (3, 4));
        assert_eq!(g.get(2, 3), 0.0);
        assert_eq!(g.get(1, 1), merged_value(&policy, &env, &(1, 1)));
        let csv = g.to_csv();
        assert!(csv.starts_with("row\\col,0,1,2,3\n0,"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn cargo_value_grid_marks_obstacles() {
        let env = CargoEnv::new(CargoParams::default()).unwrap();
        let configs = vec![
            ModuleConfig::Ddpg(DdpgConfig { actor_hidden: vec![4], critic_hidden: vec![4], ..Default::default() }),
            ModuleConfig::Dqn(DqnConfig { hidden: vec![4], ..Default::default() }),
        ];
        let policy = StackedPolicy::build(&env, &StageSpec::homogeneous(2, 0.9, 3), &configs, &[0, 1]).unwrap();
        let g = value_grid(&policy, &BuiltEnv::Cargo(env.clone()), 25, 0.3).unwrap();
        let blocked = g.values.iter().filter(|v| v.is_nan()).count();
        assert!(blocked > 0 && blocked < g.values.len());
        for (i, &y) in g.row_centers.iter().enumerate() {
            for (j, &x) in g.col_centers.iter().enumerate() {
                assert_eq!(g.get(i, j).is_nan(), !env.grid().is_free(x, y));
            }
        }
    }
}
