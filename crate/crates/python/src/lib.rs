//! Python bindings for the `sdql` crate.
//!
//! Configurations are passed as TOML text, states as lists of floats in the
//! environment's component order (`row, col` / `theta1, theta2` / `x, y, theta`).

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;

use sdql_core::environments::cargo::{CargoEnv, CargoState, RobotKind};
use sdql_core::environments::gridworld::GridWorldEnv;
use sdql_core::environments::manipulator::ManipulatorEnv;
use sdql_core::io::{encode_trainer, save_trainer, value_grid, BuiltEnv, Checkpoint, RunConfig};
use sdql_core::rl_modules::{tabular_backward_solve, tabular_flat_solve};
use sdql_core::staged_mdp::{FiniteStagedEnv, StagedEnv};
use sdql_core::trainer::{evaluate, evaluation_rng, merged_value, StackedPolicy, Trainer};
use sdql_core::SdqlError as CoreError;

create_exception!(sdql, SdqlError, PyRuntimeError, "Training or checkpoint failure.");

fn to_py(err: CoreError) -> PyErr {
    match err {
        CoreError::InvalidConfig(_) | CoreError::Format(_) | CoreError::VersionMismatch { .. } => {
            PyValueError::new_err(err.to_string())
        }
        CoreError::Io(_) => PyOSError::new_err(err.to_string()),
        CoreError::Numeric(_) => PyArithmeticError::new_err(err.to_string()),
        other => SdqlError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match value {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_u64() {
            Some(u) => u.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, json_to_py(py, v)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let json = serde_json::to_value(value).map_err(|e| SdqlError::new_err(e.to_string()))?;
    json_to_py(py, &json)
}

enum AnyTrainer {
    Gridworld(Trainer<GridWorldEnv>),
    Manipulator(Trainer<ManipulatorEnv>),
    Cargo(Trainer<CargoEnv>),
}

macro_rules! dispatch {
    ($any:expr, $t:ident => $body:expr) => {
        match $any {
            AnyTrainer::Gridworld($t) => $body,
            AnyTrainer::Manipulator($t) => $body,
            AnyTrainer::Cargo($t) => $body,
        }
    };
}

impl AnyTrainer {
    fn build(env: BuiltEnv, ck: Option<Checkpoint>, config: &RunConfig) -> Result<Self, CoreError> {
        let tc = config.trainer_config();
        Ok(match (env, ck) {
            (BuiltEnv::Gridworld(e), None) => Self::Gridworld(Trainer::new(e, tc)?),
            (BuiltEnv::Manipulator(e), None) => Self::Manipulator(Trainer::new(e, tc)?),
            (BuiltEnv::Cargo(e), None) => Self::Cargo(Trainer::new(e, tc)?),
            (BuiltEnv::Gridworld(e), Some(ck)) => Self::Gridworld(ck.into_trainer(e)?),
            (BuiltEnv::Manipulator(e), Some(ck)) => Self::Manipulator(ck.into_trainer(e)?),
            (BuiltEnv::Cargo(e), Some(ck)) => Self::Cargo(ck.into_trainer(e)?),
        })
    }
}

/// Stage-by-stage trainer, last stage first.
#[pyclass(name = "Trainer", module = "sdql")]
struct PyTrainer {
    config: RunConfig,
    env: BuiltEnv,
    inner: AnyTrainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (config, seed=None))]
    fn new(config: &str, seed: Option<u64>) -> PyResult<Self> {
        let mut config = RunConfig::parse(config).map_err(to_py)?;
        if let Some(seed) = seed {
            config.seed = seed;
        }
        let env = config.validate().map_err(to_py)?;
        let inner = AnyTrainer::build(env.clone(), None, &config).map_err(to_py)?;
        Ok(Self { config, env, inner })
    }

    /// Continues training from a checkpoint file.
    #[staticmethod]
    fn resume(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        let config = ck.config.clone();
        let env = config.validate().map_err(to_py)?;
        let inner = AnyTrainer::build(env.clone(), Some(ck), &config).map_err(to_py)?;
        Ok(Self { config, env, inner })
    }

    /// Runs one episode and returns its report, or `None` when training is over.
    fn run_episode<'py>(&mut self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyAny>>> {
        let report = py.detach(|| dispatch!(&mut self.inner, t => t.run_episode())).map_err(to_py)?;
        report.map(|r| to_dict(py, &r)).transpose()
    }

    /// Runs up to `max_episodes` episodes (all remaining by default) and
    /// returns how many ran.
    #[pyo3(signature = (max_episodes=None))]
    fn run(&mut self, py: Python<'_>, max_episodes: Option<u64>) -> PyResult<u64> {
        py.detach(|| {
            let mut ran = 0;
            while max_episodes.is_none_or(|m| ran < m) {
                if dispatch!(&mut self.inner, t => t.run_episode())?.is_none() {
                    break;
                }
                ran += 1;
            }
            Ok(ran)
        })
        .map_err(to_py)
    }

    /// Greedy evaluation on the evaluation stream of the run seed.
    fn evaluate<'py>(&self, py: Python<'py>, episodes: usize) -> PyResult<Bound<'py, PyAny>> {
        let stats = py.detach(|| dispatch!(&self.inner, t => t.evaluate(episodes))).map_err(to_py)?;
        to_dict(py, &stats)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dispatch!(&self.inner, t => save_trainer(&path, &self.config, t)).map_err(to_py)
    }

    /// Checkpoint bytes of the current state.
    fn checkpoint_bytes(&self) -> PyResult<Vec<u8>> {
        dispatch!(&self.inner, t => encode_trainer(&self.config, t)).map_err(to_py)
    }

    fn policy(&self) -> PyPolicy {
        PyPolicy {
            env: self.env.clone(),
            policy: dispatch!(&self.inner, t => t.policy().clone()),
            seed: self.config.seed,
        }
    }

    #[getter]
    fn progress<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        dispatch!(&self.inner, t => to_dict(py, t.progress()))
    }

    #[getter]
    fn diagnostics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        dispatch!(&self.inner, t => to_dict(py, t.diagnostics()))
    }

    #[getter]
    fn is_done(&self) -> bool {
        dispatch!(&self.inner, t => t.is_done())
    }

    #[getter]
    fn config(&self) -> PyResult<String> {
        self.config.to_toml().map_err(to_py)
    }
}

struct Query {
    stage: usize,
    action: Vec<f64>,
    value: f64,
}

fn query<E: StagedEnv>(policy: &StackedPolicy, env: &E, state: &E::State) -> Query {
    Query {
        stage: env.stage_of(state),
        action: policy.greedy_action(env, state).components(),
        value: merged_value(policy, env, state),
    }
}

fn expect_len(state: &[f64], n: usize, labels: &str) -> PyResult<()> {
    if state.len() != n || state.iter().any(|v| !v.is_finite()) {
        return Err(PyValueError::new_err(format!(
            "state must be {n} finite numbers ({labels}), got {state:?}"
        )));
    }
    Ok(())
}

fn query_state(policy: &StackedPolicy, env: &BuiltEnv, state: &[f64]) -> PyResult<Query> {
    match env {
        BuiltEnv::Gridworld(e) => {
            expect_len(state, 2, "row, col")?;
            let (r, c) = (state[0], state[1]);
            let inside = r >= 0.0 && c >= 0.0 && r < e.rows() as f64 && c < e.cols() as f64;
            if !inside || r.fract() != 0.0 || c.fract() != 0.0 {
                return Err(PyValueError::new_err(format!("({r}, {c}) is not a grid cell")));
            }
            Ok(query(policy, e, &(r as usize, c as usize)))
        }
        BuiltEnv::Manipulator(e) => {
            expect_len(state, 2, "theta1, theta2")?;
            Ok(query(policy, e, &e.state_at(state[0], state[1])))
        }
        BuiltEnv::Cargo(e) => {
            expect_len(state, 3, "x, y, theta")?;
            let (x, y, theta) = (state[0], state[1], state[2]);
            if !e.grid().is_free(x, y) {
                return Err(PyValueError::new_err(format!("({x}, {y}) is not a free arena position")));
            }
            let kind = if x > e.x_split() { RobotKind::SelfPropelled } else { RobotKind::Slider };
            Ok(query(policy, e, &CargoState { x, y, theta, kind }))
        }
    }
}

/// Greedy stacked policy loaded from a checkpoint or taken from a trainer.
#[pyclass(name = "Policy", module = "sdql")]
struct PyPolicy {
    env: BuiltEnv,
    policy: StackedPolicy,
    seed: u64,
}

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        let env = ck.config.validate().map_err(to_py)?;
        Ok(Self {
            env,
            policy: ck.policy(),
            seed: ck.config.seed,
        })
    }

    /// Greedy action components for `state`.
    fn act(&self, state: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(query_state(&self.policy, &self.env, &state)?.action)
    }

    /// Merged value: the value of the module owning the state's stage.
    fn value(&self, state: Vec<f64>) -> PyResult<f64> {
        Ok(query_state(&self.policy, &self.env, &state)?.value)
    }

    fn stage(&self, state: Vec<f64>) -> PyResult<usize> {
        Ok(query_state(&self.policy, &self.env, &state)?.stage)
    }

    /// Greedy episodes from the natural start distribution. Returns the
    /// summary statistics and one list of per-step records per episode.
    #[pyo3(signature = (episodes, seed=None))]
    fn evaluate<'py>(&self, py: Python<'py>, episodes: usize, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
        if episodes == 0 {
            return Err(PyValueError::new_err("episodes must be at least 1"));
        }
        let mut rng = evaluation_rng(seed.unwrap_or(self.seed));
        let (stats, trajectories) = py
            .detach(|| {
                sdql_core::with_env!(&self.env, e => {
                    evaluate(&self.policy, e, episodes, &mut rng)
                })
            })
            .map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("stats", to_dict(py, &stats)?)?;
        out.set_item("trajectories", to_dict(py, &trajectories)?)?;
        Ok(out.into_any())
    }

    /// Merged value on the environment's 2-D slice as
    /// `{row_label, col_label, rows, cols, values}` with `values[i][j]` at
    /// `(rows[i], cols[j])`.
    #[pyo3(signature = (resolution=50, theta=0.0))]
    fn value_grid<'py>(&self, py: Python<'py>, resolution: usize, theta: f64) -> PyResult<Bound<'py, PyDict>> {
        let grid = value_grid(&self.policy, &self.env, resolution, theta).map_err(to_py)?;
        let width = grid.col_centers.len();
        let values: Vec<Vec<f64>> = grid.values.chunks(width).map(<[f64]>::to_vec).collect();
        let out = PyDict::new(py);
        out.set_item("row_label", grid.row_label)?;
        out.set_item("col_label", grid.col_label)?;
        out.set_item("rows", grid.row_centers)?;
        out.set_item("cols", grid.col_centers)?;
        out.set_item("values", values)?;
        Ok(out)
    }

    #[getter]
    fn environment(&self) -> &'static str {
        sdql_core::with_env!(&self.env, e => e.name())
    }

    #[getter]
    fn n_stages(&self) -> usize {
        self.policy.n_stages()
    }

    #[getter]
    fn state_labels(&self) -> Vec<&'static str> {
        sdql_core::with_env!(&self.env, e => e.state_labels())
    }
}

/// Parses and checks a TOML configuration; returns it in canonical form.
#[pyfunction]
fn validate_config(config: &str) -> PyResult<String> {
    let config = RunConfig::parse(config).map_err(to_py)?;
    config.validate().map_err(to_py)?;
    config.to_toml().map_err(to_py)
}

/// Exact optimal state values of a gridworld configuration as a
/// `rows x cols` list, by stage-wise backward solve or by a flat solve of
/// the whole task.
#[pyfunction]
#[pyo3(signature = (config, method="backward", tol=1e-12))]
fn solve_gridworld(config: &str, method: &str, tol: f64) -> PyResult<Vec<Vec<f64>>> {
    let config = RunConfig::parse(config).map_err(to_py)?;
    let BuiltEnv::Gridworld(env) = config.validate().map_err(to_py)? else {
        return Err(PyValueError::new_err("solve_gridworld needs a gridworld configuration"));
    };
    let discounts = &config.stages.discounts;
    let q = match method {
        "backward" => tabular_backward_solve(&env, discounts, tol),
        "flat" => tabular_flat_solve(&env, discounts, tol),
        other => return Err(PyValueError::new_err(format!("unknown method {other:?}; use \"backward\" or \"flat\""))),
    }
    .map_err(to_py)?;
    Ok((0..env.rows())
        .map(|r| (0..env.cols()).map(|c| q.value(env.state_id(&(r, c)))).collect())
        .collect())
}

#[pymodule]
fn sdql(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainer>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(solve_gridworld, m)?)?;
    m.add("SdqlError", m.py().get_type::<SdqlError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
