pub mod cli;
pub mod environments;
pub mod error;
pub mod io;
pub mod nncore;
pub mod rl_modules;
pub mod staged_mdp;
pub mod trainer;

pub use error::{Result, SdqlError};
