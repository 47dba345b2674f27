//! Configuration, experiment orchestration and the command line.

pub mod cli;
pub mod config;
pub mod export;
pub mod run;
pub mod selfcheck;
pub mod summary;
pub mod sweep;

pub use cli::run_cli;
pub use config::{parse_config, ExperimentConfig};
pub use run::{build_federation, prepare_data, run_experiment, run_to_dir};
pub use summary::{emit_summary, Cell, SummaryTable};
pub use sweep::{plan_sweep, run_sweep, PlannedRun};
