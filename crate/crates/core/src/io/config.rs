use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::environments::{CargoEnv, CargoParams, GridWorldEnv, GridWorldParams, ManipulatorEnv, ManipulatorParams};
use crate::error::{Result, SdqlError};
use crate::rl_modules::ModuleConfig;
use crate::staged_mdp::{StageSpec, StagedEnv};
use crate::trainer::{module_seeds, StackedPolicy, TrainerConfig, TrainerParams};

/// Task selection plus parameter overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum EnvConfig {
    Gridworld(GridWorldParams),
    Manipulator(ManipulatorParams),
    Cargo(CargoParams),
}

/// A constructed environment of any supported kind.
#[derive(Clone, Debug)]
pub enum BuiltEnv {
    Gridworld(GridWorldEnv),
    Manipulator(ManipulatorEnv),
    Cargo(CargoEnv),
}

/// Evaluates `$body` with `$env` bound to the concrete environment inside a
/// [`BuiltEnv`].
#[macro_export]
macro_rules! with_env {
    ($built:expr, $env:ident => $body:expr) => {
        match $built {
            $crate::io::BuiltEnv::Gridworld($env) => $body,
            $crate::io::BuiltEnv::Manipulator($env) => $body,
            $crate::io::BuiltEnv::Cargo($env) => $body,
        }
    };
}

impl EnvConfig {
    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Gridworld(_) => "gridworld",
            EnvConfig::Manipulator(_) => "manipulator",
            EnvConfig::Cargo(_) => "cargo",
        }
    }

    pub fn build(&self) -> Result<BuiltEnv> {
        Ok(match self {
            EnvConfig::Gridworld(p) => BuiltEnv::Gridworld(GridWorldEnv::new(p.clone())?),
            EnvConfig::Manipulator(p) => BuiltEnv::Manipulator(ManipulatorEnv::new(p.clone())?),
            EnvConfig::Cargo(p) => BuiltEnv::Cargo(CargoEnv::new(p.clone())?),
        })
    }
}

fn default_output_dir() -> String {
    "runs/sdql".into()
}

/// Contents of a run configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    pub environment: EnvConfig,
    pub stages: StageSpec,
    #[serde(default)]
    pub trainer: TrainerParams,
    pub modules: Vec<ModuleConfig>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SdqlError::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            SdqlError::InvalidConfig(msg) => SdqlError::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SdqlError::Format(format!("config serialization: {e}")))
    }

    pub fn trainer_config(&self) -> TrainerConfig {
        TrainerConfig {
            params: self.trainer.clone(),
            seed: self.seed,
            stages: self.stages.clone(),
            modules: self.modules.clone(),
        }
    }

    /// Checks every section against the environment it describes and returns
    /// that environment.
    pub fn validate(&self) -> Result<BuiltEnv> {
        let env = self.environment.build().map_err(|e| match e {
            SdqlError::InvalidConfig(msg) if !msg.starts_with("environment.") => {
                SdqlError::InvalidConfig(format!("environment: {msg}"))
            }
            other => other,
        })?;
        self.stages.validate()?;
        self.trainer.validate().map_err(SdqlError::InvalidConfig)?;
        let n = with_env!(&env, e => e.n_stages());
        if self.stages.n_stages != n {
            return Err(SdqlError::InvalidConfig(format!(
                "stages.n_stages = {} but {} has {n} stages",
                self.stages.n_stages,
                self.environment.name()
            )));
        }
        if self.modules.len() != n {
            return Err(SdqlError::InvalidConfig(format!(
                "modules lists {} entries but {} has {n} stages",
                self.modules.len(),
                self.environment.name()
            )));
        }
        for (i, m) in self.modules.iter().enumerate() {
            let space = with_env!(&env, e => e.action_space(i + 1));
            m.check_space(&space)
                .map_err(|msg| SdqlError::InvalidConfig(format!("modules[{i}].kind: {msg}")))?;
        }
        with_env!(&env, e => StackedPolicy::build(e, &self.stages, &self.modules, &module_seeds(self.seed, n)))?;
        Ok(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GRID: &str = r#"
seed = 3
output_dir = "out"

[environment]
name = "gridworld"
rows = 6
cols = 6
band_thresholds = [3]
goal = [5, 5]

[stages]
n_stages = 2
discounts = [0.99, 0.99]
max_steps = 50

[trainer]
episodes_per_phase = 10

[[modules]]
kind = "dqn"
hidden = [16]

[[modules]]
kind = "tabular"
"#;

    #[test]
    fn parses_and_validates() {
        let c = RunConfig::parse(GRID).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.trainer.episodes_per_phase, 10);
        assert_eq!(c.trainer.batch_size, 64);
        assert!(matches!(c.environment, EnvConfig::Gridworld(ref p) if p.rows == 6 && p.goal == (5, 5)));
        assert!(matches!(c.validate().unwrap(), BuiltEnv::Gridworld(_)));
        let again = RunConfig::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        for (from, to) in [
            ("episodes_per_phase = 10", "episodes_per_phase = 10\nepisode_per_phase = 3"),
            ("hidden = [16]", "hiden = [16]"),
            ("rows = 6", "rowz = 6"),
            ("seed = 3", "seed = 3\nsede = 4"),
        ] {
            let text = GRID.replace(from, to);
            assert!(RunConfig::parse(&text).is_err(), "accepted {to:?}");
        }
    }

    #[test]
    fn module_space_mismatch_names_field() {
        let text = GRID.replace("kind = \"tabular\"", "kind = \"ddpg\"");
        let err = RunConfig::parse(&text).unwrap().validate().unwrap_err().to_string();
        assert!(err.contains("modules[1].kind"), "{err}");
    }

    #[test]
    fn stage_count_mismatch() {
        let text = GRID.replace("band_thresholds = [3]", "band_thresholds = [2, 4]");
        let err = RunConfig::parse(&text).unwrap().validate().unwrap_err().to_string();
        assert!(err.contains("stages.n_stages"), "{err}");
        let text = GRID.replace("episodes_per_phase = 10", "batch_size = 0");
        let err = RunConfig::parse(&text).unwrap().validate().unwrap_err().to_string();
        assert!(err.contains("trainer.batch_size"), "{err}");
    }
}
