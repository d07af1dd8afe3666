//! Move a running forecast partition to a spare node and show the phase
//! timeline, the deduplicated overlap and the comparison with the oracle.

use elastream::harness::{run_oracle, run_scenario, RunOptions, Scenario};

fn main() {
    let path = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/scenarios/forecast_pipeline.toml"
    );
    let scenario = Scenario::load(path).unwrap();
    let oracle = run_oracle(&scenario).unwrap();
    let run = run_scenario(&scenario, &oracle, RunOptions::default()).unwrap();
    let report = &run.report;
    for m in &report.migrations {
        println!(
            "{}/p{}: n{} -> n{} ({})",
            m.operator, m.partition, m.source_node, m.target_node, m.outcome
        );
        for line in &m.timeline {
            println!("  {line}");
        }
        println!("  outputs produced by both replicas: {}", m.overlap_outputs);
    }
    println!(
        "duplicates dropped downstream: {}",
        report.events.replica_duplicates_dropped
    );
    println!(
        "inputs held back by the migration: {}",
        report.probes.deferred_events
    );
    println!("sink vs oracle: {:?}", report.diff);
    println!("verdict: {:?}", report.verdict);
}
