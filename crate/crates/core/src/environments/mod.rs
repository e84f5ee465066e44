//! Benchmark tasks with a linear stage structure.

pub mod cargo;
pub mod gridworld;
pub mod manipulator;

pub use cargo::{CargoEnv, CargoParams, CargoState, OccupancyGrid, RobotKind};
pub use gridworld::{GridWorldEnv, GridWorldParams};
pub use manipulator::{ArmState, ManipulatorEnv, ManipulatorParams};
