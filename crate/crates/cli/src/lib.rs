//! Experiment harness for the risk-sensitive distributional RL engine:
//! flat-key config parsing, the worked counterexample, exact-DP and
//! training runners, and schema-stable CSV reports.

pub mod config;
pub mod counterexample;
pub mod report;
pub mod runner;

pub use config::{load_config, parse_config, ConfigError, EnvConfig, ExperimentConfig};
pub use counterexample::counterexample;
pub use runner::{run_exact, run_sweep, run_train};
