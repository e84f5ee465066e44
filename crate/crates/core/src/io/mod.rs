//! Run configuration, checkpoints and CSV export.

mod binary;
mod checkpoint;
mod config;
mod export;

pub use checkpoint::{encode_trainer, save_trainer, Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{BuiltEnv, EnvConfig, RunConfig};
pub use export::{action_labels, trajectories_csv, value_grid, write_text, ValueGrid};
