//! Deterministic test harness: scenario files, a simulated cluster, a
//! single-threaded reference execution and the comparison between them.

pub mod diff;
pub mod engine;
pub mod oracle;
pub mod report;
pub mod scenario;
pub mod sweep;

pub use diff::{diff_files, diff_logs, FileDiff, LogDiff};
pub use engine::{run_scenario, RunError, RunOptions, RunOutcome};
pub use oracle::{run_oracle, OracleRun};
pub use report::{RunReport, Verdict};
pub use scenario::{ConfigError, Scenario};
pub use sweep::{sweep_migration, SweepPoint};
