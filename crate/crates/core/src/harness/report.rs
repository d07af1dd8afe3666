//! Run reports: machine-readable JSON and a human-readable summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::harness::diff::LogDiff;
use crate::migration::MigrationCounters;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EventCounts {
    /// Data events emitted by the sources.
    pub generated: u64,
    pub messages_sent: u64,
    pub messages_delivered: u64,
    /// Network-injected copies dropped on ingress.
    pub transport_duplicates_dropped: u64,
    /// Outputs dropped downstream because another replica of the same
    /// partition already delivered them.
    pub replica_duplicates_dropped: u64,
    /// Sealed messages rejected by the replay check.
    pub replay_drops: u64,
    /// Messages addressed to a replica that no longer exists.
    pub orphaned_messages: u64,
    pub sink_outputs: u64,
    pub oracle_outputs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MigrationSummary {
    pub operator: String,
    pub op_id: u64,
    pub partition: u32,
    pub source_node: u64,
    pub target_node: u64,
    pub requested_at: u64,
    /// `switched`, `rolled_back` or `refused`.
    pub outcome: String,
    pub reason: Option<String>,
    pub divergence: bool,
    pub state_hash_checked: bool,
    pub counters: MigrationCounters,
    /// Outputs emitted by both replicas while they overlapped.
    pub overlap_outputs: u64,
    pub finished_at: Option<u64>,
    pub timeline: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Probes {
    /// Releasable inputs a serving replica left unprocessed at the end of
    /// a step.
    pub deferred_events: u64,
    pub budget_violations: u64,
    pub max_resident_bytes: u64,
    pub budget_bytes: Option<u64>,
    pub evictions: u64,
    pub faults: u64,
    /// Sentinel occurrences in bytes that left an enclave; `None` when not
    /// scanned.
    pub sentinel_leaks: Option<u64>,
    pub bytes_scanned: u64,
    pub authentication_failures: u64,
    pub internal_errors: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    /// Logical steps from source emission to sink release.
    pub histogram: BTreeMap<u64, u64>,
    pub mean: f64,
    pub max: u64,
    /// Outputs whose input was emitted while no migration was running.
    pub max_outside_migration: u64,
    pub max_during_migration: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ResidencySummary {
    pub released: u64,
    pub mean_steps: f64,
    pub max_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub enclave: bool,
    pub steps: u64,
    pub events: EventCounts,
    pub migrations: Vec<MigrationSummary>,
    pub diff: LogDiff,
    pub probes: Probes,
    pub latency: LatencySummary,
    pub residency: ResidencySummary,
    /// Hex state hash of each partition's serving replica at the end.
    pub final_state_hashes: BTreeMap<String, String>,
    pub verdict: Verdict,
    pub failures: Vec<String>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    /// Sets the verdict from the diff and the probes.
    pub fn judge(&mut self) {
        let mut failures = Vec::new();
        if let LogDiff::Diverged { index, .. } = &self.diff {
            failures.push(format!(
                "sink output differs from the oracle at event #{index}"
            ));
        }
        if self.probes.deferred_events > 0 {
            failures.push(format!(
                "{} input event(s) waited on a migration",
                self.probes.deferred_events
            ));
        }
        if self.probes.budget_violations > 0 {
            failures.push(format!(
                "enclave budget exceeded {} time(s)",
                self.probes.budget_violations
            ));
        }
        if let Some(leaks) = self.probes.sentinel_leaks.filter(|&n| n > 0) {
            failures.push(format!(
                "sentinel found {leaks} time(s) outside the enclave"
            ));
        }
        if self.probes.authentication_failures > 0 {
            failures.push(format!(
                "{} message(s) failed authentication",
                self.probes.authentication_failures
            ));
        }
        for m in self.migrations.iter().filter(|m| m.divergence) {
            failures.push(format!(
                "migration of {} partition {} diverged: {}",
                m.operator,
                m.partition,
                m.reason.as_deref().unwrap_or("")
            ));
        }
        failures.extend(self.probes.internal_errors.iter().cloned());
        self.verdict = if failures.is_empty() {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        self.failures = failures;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable form. Only the first line varies between identical
    /// runs.
    pub fn to_text(&self, generated_at: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "elastream run report ({generated_at})");
        let _ = writeln!(
            s,
            "scenario {} seed {} enclave {} steps {}",
            self.scenario,
            self.seed,
            if self.enclave { "on" } else { "off" },
            self.steps
        );
        let e = &self.events;
        let _ = writeln!(
            s,
            "events: generated {} sent {} delivered {} sink {} oracle {}",
            e.generated, e.messages_sent, e.messages_delivered, e.sink_outputs, e.oracle_outputs
        );
        let _ = writeln!(
            s,
            "dropped: transport duplicates {} replica duplicates {} replays {} orphaned {}",
            e.transport_duplicates_dropped,
            e.replica_duplicates_dropped,
            e.replay_drops,
            e.orphaned_messages
        );
        for m in &self.migrations {
            let _ = writeln!(
                s,
                "migration {}/p{} n{}->n{} at {}: {}{}",
                m.operator,
                m.partition,
                m.source_node,
                m.target_node,
                m.requested_at,
                m.outcome,
                m.reason
                    .as_ref()
                    .map(|r| format!(" ({r})"))
                    .unwrap_or_default()
            );
            for line in &m.timeline {
                let _ = writeln!(s, "  {line}");
            }
            let _ = writeln!(s, "  overlap outputs {}", m.overlap_outputs);
        }
        match &self.diff {
            LogDiff::Equal { events } => {
                let _ = writeln!(s, "diff: equal ({events} events)");
            }
            LogDiff::Diverged {
                index,
                expected,
                actual,
            } => {
                let _ = writeln!(s, "diff: first divergence at event #{index}");
                let _ = writeln!(
                    s,
                    "  oracle: {}",
                    expected.as_deref().unwrap_or("<end of log>")
                );
                let _ = writeln!(
                    s,
                    "  run:    {}",
                    actual.as_deref().unwrap_or("<end of log>")
                );
            }
        }
        let p = &self.probes;
        let _ = writeln!(s, "deferred events: {}", p.deferred_events);
        if let Some(budget) = p.budget_bytes {
            let _ = writeln!(
                s,
                "enclave: max resident {} of {} bytes, {} evictions, {} faults, sentinel leaks {}",
                p.max_resident_bytes,
                budget,
                p.evictions,
                p.faults,
                p.sentinel_leaks
                    .map_or("not scanned".to_string(), |n| n.to_string())
            );
        }
        let l = &self.latency;
        let _ = writeln!(
            s,
            "latency (steps): mean {:.2} max {} outside migration {} during migration {}",
            l.mean,
            l.max,
            l.max_outside_migration,
            l.max_during_migration
                .map_or("-".to_string(), |v| v.to_string())
        );
        let _ = writeln!(
            s,
            "merge residency (steps): mean {:.2} max {}",
            self.residency.mean_steps, self.residency.max_steps
        );
        let _ = writeln!(
            s,
            "verdict: {}",
            match self.verdict {
                Verdict::Pass => "pass",
                Verdict::Fail => "fail",
            }
        );
        for f in &self.failures {
            let _ = writeln!(s, "  {f}");
        }
        s
    }
}
