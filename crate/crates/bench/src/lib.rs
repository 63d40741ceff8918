//! Monte Carlo benchmark harness for the filter roster on the Lorenz'96
//! system: truth simulation, per-run RMSE, aggregated reports, and CSV/JSON
//! emission. The `ipf-bench` binary exposes `simulate`, `run`, and `compare`
//! subcommands over this library.

pub mod config;
pub mod error;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, FilterSpec, InitBias};
pub use error::{BenchError, Result};
pub use report::{emit_report, read_report, rmse_series, FilterReport, RunFailure, RunReport};
pub use runner::{
    build_model, run_filter_on_trajectory, run_monte_carlo, run_seed, run_single,
    simulate_run_truth, SingleRun, TRUTH_SPINUP_STEPS,
};
