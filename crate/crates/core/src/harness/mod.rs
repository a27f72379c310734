//! Configuration loading, the acceptance suites, and report output.

pub mod config;
pub mod report;
pub mod suites;

pub use config::{load_config, parse_config, ProblemConfig};
pub use report::{CaseReport, RunReport, Verdict};
pub use suites::{run_in_pool, run_suite, threads_from_env, RunOptions, Suite};
