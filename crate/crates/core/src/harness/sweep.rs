//! Re-running a scenario with its first migration moved across a range of
//! start steps.

use std::ops::Range;

use serde::Serialize;

use crate::harness::engine::{run_scenario, RunError, RunOptions};
use crate::harness::oracle::run_oracle;
use crate::harness::report::Verdict;
use crate::harness::scenario::{ConfigError, Scenario};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub at_step: u64,
    pub verdict: Option<Verdict>,
    /// Migration outcome, or the error that stopped the run.
    pub outcome: String,
    pub equal_to_oracle: bool,
    pub deferred_events: u64,
    pub replica_duplicates_dropped: u64,
    pub failures: Vec<String>,
}

impl SweepPoint {
    pub fn passed(&self) -> bool {
        self.verdict == Some(Verdict::Pass)
    }
}

/// Runs `scenario` once per start step in `range`, `step` apart, with the
/// first `[[migration]]` entry moved to that step. The oracle is computed
/// once.
pub fn sweep_migration(
    scenario: &Scenario,
    range: Range<u64>,
    step: u64,
) -> Result<Vec<SweepPoint>, RunError> {
    let template = scenario
        .migrations
        .first()
        .cloned()
        .ok_or_else(|| ConfigError::Invalid {
            field: "migration".into(),
            message: "a sweep needs at least one [[migration]] entry".into(),
        })?;
    if step == 0 {
        return Err(ConfigError::Invalid {
            field: "step".into(),
            message: "must be positive".into(),
        }
        .into());
    }
    let oracle = run_oracle(scenario).map_err(|e| RunError::Startup(e.to_string()))?;
    let mut points = Vec::new();
    for at in range.step_by(step as usize) {
        let mut s = scenario.clone();
        let mut m = template.clone();
        m.at_step = at;
        s.migrations = vec![m];
        let point = match run_scenario(&s, &oracle, RunOptions::default()) {
            Ok(run) => {
                let r = run.report;
                SweepPoint {
                    at_step: at,
                    verdict: Some(r.verdict),
                    outcome: r
                        .migrations
                        .first()
                        .map_or_else(|| "none".to_string(), |m| m.outcome.clone()),
                    equal_to_oracle: r.diff.is_equal(),
                    deferred_events: r.probes.deferred_events,
                    replica_duplicates_dropped: r.events.replica_duplicates_dropped,
                    failures: r.failures,
                }
            }
            Err(e) => SweepPoint {
                at_step: at,
                verdict: None,
                outcome: e.to_string(),
                equal_to_oracle: false,
                deferred_events: 0,
                replica_duplicates_dropped: 0,
                failures: vec![e.to_string()],
            },
        };
        points.push(point);
    }
    Ok(points)
}
