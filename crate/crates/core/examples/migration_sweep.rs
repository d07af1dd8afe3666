//! Move the migration of the shipped pipeline across the run and check every
//! placement against the oracle. Pass a step size to change the stride.

use elastream::harness::{sweep_migration, Scenario};

fn main() {
    let stride = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(100);
    let path = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/scenarios/forecast_pipeline.toml"
    );
    let scenario = Scenario::load(path).unwrap();
    let points = sweep_migration(&scenario, 1..1000, stride).unwrap();
    for p in &points {
        println!(
            "migrate at {:4}: {:<8} equal={} deferred={} duplicates dropped={}",
            p.at_step,
            p.outcome,
            p.equal_to_oracle,
            p.deferred_events,
            p.replica_duplicates_dropped
        );
    }
    let passed = points.iter().filter(|p| p.passed()).count();
    println!("{passed} of {} placements passed", points.len());
}
