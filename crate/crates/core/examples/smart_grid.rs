//! The smart-grid workload on its own: generated plug readings, load
//! forecasts and anomaly alarms computed by folding the operators directly.

use elastream::event::Event;
use elastream::runtime::{MemStore, OperatorInstance, Params};
use elastream::workloads::{standard_registry, AnomalyBurst, PlugGenerator, PlugReading};

fn main() {
    let generator = PlugGenerator {
        plugs: 4,
        readings_per_plug: 200,
        anomalies: vec![AnomalyBurst {
            plug: 1,
            from: 120,
            to: 130,
            factor: 10.0,
        }],
        ..PlugGenerator::default()
    };
    let mut events: Vec<Event> = generator
        .generate()
        .into_iter()
        .map(|e| e.event)
        .filter(Event::is_data)
        .collect();
    events.sort_by_key(|e| (e.ts, e.source));

    let registry = standard_registry();
    let mut forecast = OperatorInstance::new(
        1,
        0,
        registry.build("forecast", &Params::new()).unwrap(),
        MemStore::new(),
        16,
    );
    let mut anomaly = OperatorInstance::new(
        2,
        0,
        registry.build("anomaly", &Params::new()).unwrap(),
        MemStore::new(),
        16,
    );

    let mut forecasts = 0;
    for e in &events {
        for out in forecast.process(e).unwrap() {
            forecasts += 1;
            let f = PlugReading::decode(&out.payload).unwrap();
            if forecasts % 25 == 0 {
                println!(
                    "plug {} slot {:2}: forecast {:.2} W",
                    f.plug_id,
                    f.slot,
                    f.load as f64 / 100.0
                );
            }
        }
        for out in anomaly.process(e).unwrap() {
            let r = PlugReading::decode(&out.payload).unwrap();
            println!(
                "alarm: plug {} at ts {} with {:.2} W",
                r.plug_id,
                out.ts,
                r.load as f64 / 100.0
            );
        }
    }
    println!("{} readings, {forecasts} forecasts", events.len());
}
