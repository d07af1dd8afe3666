use std::path::PathBuf;

use elastream::enclave::measure;
use elastream::harness::scenario::LinkOverride;
use elastream::harness::{
    run_oracle, run_scenario, ConfigError, RunError, RunOptions, RunOutcome, Scenario,
};
use elastream::simnet::Delay;

fn scenario(name: &str) -> Scenario {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "scenarios", name]
        .iter()
        .collect();
    Scenario::load(path).unwrap()
}

fn run(s: &Scenario) -> RunOutcome {
    let oracle = run_oracle(s).unwrap();
    run_scenario(s, &oracle, RunOptions::default()).unwrap()
}

fn without_migrations(mut s: Scenario) -> Scenario {
    s.migrations.clear();
    s
}

#[test]
fn baseline_passes_without_replica_duplicates() {
    let r = run(&without_migrations(scenario("forecast_pipeline.toml"))).report;
    assert!(r.passed(), "{:?}", r.failures);
    assert!(r.migrations.is_empty());
    assert_eq!(r.events.replica_duplicates_dropped, 0);
    assert_eq!(r.latency.max_during_migration, None);
}

#[test]
fn migration_drops_exactly_the_overlapping_outputs() {
    let s = scenario("forecast_pipeline.toml");
    assert_eq!(s.migrations[0].at_step, 400);
    let r = run(&s).report;
    assert!(r.passed(), "{:?}", r.failures);
    let m = &r.migrations[0];
    assert_eq!(m.outcome, "switched");
    assert!(m.state_hash_checked || m.counters.compared_outputs > 0);
    assert!(r.events.replica_duplicates_dropped > 0);
    let overlap: u64 = r.migrations.iter().map(|m| m.overlap_outputs).sum();
    assert_eq!(r.events.replica_duplicates_dropped, overlap);
    assert!(m.counters.duplicated_inputs > 0);
    let phases: Vec<&str> = m
        .timeline
        .iter()
        .map(|l| l.split_whitespace().nth(3).unwrap())
        .collect();
    assert_eq!(
        phases,
        [
            "single->duplicating",
            "duplicating->snapshotting",
            "snapshotting->syncing",
            "syncing->switched"
        ]
    );
}

#[test]
fn corrupt_transfer_rolls_back_to_the_baseline_state() {
    for file in ["forecast_pipeline.toml", "enclave_pipeline.toml"] {
        let mut s = scenario(file);
        s.migrations[0].corrupt_transfer = true;
        let r = run(&s).report;
        let m = &r.migrations[0];
        assert_eq!(m.outcome, "rolled_back", "{file}");
        assert!(!m.divergence);
        assert!(
            m.reason.as_deref().unwrap().contains("snapshot"),
            "{:?}",
            m.reason
        );
        assert!(r.passed(), "{file}: {:?}", r.failures);
        let baseline = run(&without_migrations(scenario(file))).report;
        assert_eq!(r.final_state_hashes, baseline.final_state_hashes, "{file}");
    }
}

#[test]
fn unavailable_target_is_refused() {
    let mut s = scenario("forecast_pipeline.toml");
    s.migrations[0].target_node = 99;
    let r = run(&s).report;
    assert_eq!(r.migrations[0].outcome, "refused");
    assert!(r.migrations[0].reason.as_deref().unwrap().contains("n99"));
    assert!(r.passed());

    let mut s = scenario("forecast_pipeline.toml");
    s.cluster.failed_nodes = vec![30];
    let r = run(&s).report;
    assert_eq!(r.migrations[0].outcome, "refused");
}

#[test]
fn reports_are_deterministic() {
    let s = scenario("enclave_pipeline.toml");
    let a = run(&s).report;
    let b = run(&s).report;
    assert_eq!(a.to_json(), b.to_json());
    let (ta, tb) = (a.to_text("first"), b.to_text("second"));
    assert_ne!(ta, tb);
    assert_eq!(
        ta.lines().skip(1).collect::<Vec<_>>(),
        tb.lines().skip(1).collect::<Vec<_>>()
    );

    let mut other = s.clone();
    other.seed += 1;
    assert_ne!(run(&other).report.to_json(), a.to_json());
}

#[test]
fn trace_records_every_delivery() {
    let s = scenario("forecast_pipeline.toml");
    let oracle = run_oracle(&s).unwrap();
    let out = run_scenario(&s, &oracle, RunOptions { trace: true }).unwrap();
    assert_eq!(out.trace.len() as u64, out.report.events.messages_delivered);
    assert_eq!(
        out.trace.iter().filter(|l| l.contains("snapshot")).count(),
        1
    );
}

#[test]
fn enclave_keeps_the_sentinel_inside() {
    let s = scenario("enclave_pipeline.toml");
    let r = run(&s).report;
    assert!(r.passed(), "{:?}", r.failures);
    assert_eq!(r.probes.sentinel_leaks, Some(0));
    assert!(r.probes.bytes_scanned > 0);
    assert!(r.probes.evictions > 0);
    assert!(r.probes.max_resident_bytes <= 1024 * 1024);

    // Control: the same keys travel in clear text without the enclave, and
    // the scanner is not consulted.
    let mut plain = s.clone();
    plain.enclave.enabled = false;
    assert_eq!(run(&plain).report.probes.sentinel_leaks, None);
}

#[test]
fn enclave_with_duplicating_links_drops_replays() {
    let mut s = scenario("enclave_pipeline.toml");
    s.network.duplicate_prob = 1.0;
    let r = run(&s).report;
    assert!(r.passed(), "{:?}", r.failures);
    assert!(r.events.replay_drops > 0);
    assert_eq!(r.probes.authentication_failures, 0);
}

#[test]
fn attestation_mismatch_stops_startup() {
    let mut s = scenario("enclave_pipeline.toml");
    s.operators[0].expected_measurement = Some(hex::encode([7u8; 32]));
    let oracle = run_oracle(&s).unwrap();
    match run_scenario(&s, &oracle, RunOptions::default()) {
        Err(e @ RunError::Startup(_)) => {
            assert!(e.to_string().contains("forecast"), "{e}");
            assert_eq!(e.exit_code(), 2);
        }
        other => panic!(
            "expected a startup error, got {:?}",
            other.map(|o| o.report.verdict)
        ),
    }

    let params = s.params(0);
    s.operators[0].expected_measurement =
        Some(hex::encode(measure(&s.operators[0].logic, &params)));
    assert!(run(&s).report.passed());
}

#[test]
fn a_silent_link_is_reported_as_a_stall() {
    let mut s = without_migrations(scenario("forecast_pipeline.toml"));
    s.stall_steps = 50;
    s.network.link.push(LinkOverride {
        from: 2,
        to: 10,
        delay: Some(Delay::Fixed { steps: 500 }),
        duplicate_prob: None,
    });
    let oracle = run_oracle(&s).unwrap();
    match run_scenario(&s, &oracle, RunOptions::default()) {
        Err(RunError::Stall { detail, .. }) => assert!(detail.contains("operator 1"), "{detail}"),
        other => panic!(
            "expected a stall, got {:?}",
            other.map(|o| o.report.verdict)
        ),
    }
}

#[test]
fn relaxed_commutative_operator_matches_the_oracle() {
    let mut s = without_migrations(scenario("forecast_pipeline.toml"));
    s.operators.truncate(1);
    s.operators[0].name = "sum".into();
    s.operators[0].logic = "running_sum".into();
    s.operators[0].params.clear();
    s.operators[0].commutative = true;
    s.operators[0].relaxed = true;
    s.sink.inputs = vec!["sum".into()];
    let relaxed = run(&s).report;
    assert!(relaxed.passed(), "{:?}", relaxed.failures);
    s.operators[0].relaxed = false;
    let ordered = run(&s).report;
    assert_eq!(relaxed.final_state_hashes, ordered.final_state_hashes);
}

#[test]
fn config_errors_point_at_the_problem() {
    let text = std::fs::read_to_string(
        [
            env!("CARGO_MANIFEST_DIR"),
            "scenarios",
            "forecast_pipeline.toml",
        ]
        .iter()
        .collect::<PathBuf>(),
    )
    .unwrap();
    let broken = text.replace("period = 10\nanomalies", "period = \"ten\"\nanomalies");
    match Scenario::parse(&broken) {
        Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 13),
        other => panic!("{other:?}"),
    }
    let dangling = text.replace(
        "inputs = [\"forecast\", \"anomaly\"]",
        "inputs = [\"forecast\", \"nope\"]",
    );
    match Scenario::parse(&dangling) {
        Err(ConfigError::Invalid { message, .. }) => assert!(message.contains("nope"), "{message}"),
        other => panic!("{other:?}"),
    }
}
