//! Command-line front end for the `cbf-swarm` simulator.

pub mod args;
pub mod commands;
pub mod config;

pub use args::{dispatch, Cli};
pub use commands::{
    cmd_compare, cmd_config, cmd_riskmap, cmd_run, cmd_trials, EXIT_OK, EXIT_SAFETY, EXIT_USAGE,
};
pub use config::{load_scenario, Override, ScenarioSource};
