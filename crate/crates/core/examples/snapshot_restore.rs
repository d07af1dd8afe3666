//! Snapshot an operator partition mid-stream, restore it elsewhere and
//! replay the whole input: the timestamp vector absorbs what the snapshot
//! already covers.

use elastream::event::Event;
use elastream::runtime::{MemStore, Offer, OperatorInstance, Params, StateSnapshot};
use elastream::workloads::{standard_registry, PlugGenerator};

fn instance() -> OperatorInstance<MemStore> {
    let logic = standard_registry()
        .build("forecast", &Params::new())
        .unwrap();
    OperatorInstance::new(1, 0, logic, MemStore::new(), 16)
}

fn main() {
    let generator = PlugGenerator {
        plugs: 3,
        readings_per_plug: 40,
        ..PlugGenerator::default()
    };
    let mut events: Vec<Event> = generator
        .generate()
        .into_iter()
        .map(|e| e.event)
        .filter(Event::is_data)
        .collect();
    events.sort_by_key(|e| (e.ts, e.source));

    let mut original = instance();
    let mut outputs = Vec::new();
    for e in &events[..70] {
        outputs.extend(original.process(e).unwrap());
    }
    let bytes = original.snapshot().unwrap().encode();
    println!(
        "snapshot after 70 events: {} bytes, hash {}",
        bytes.len(),
        hex::encode(original.state_hash().unwrap())
    );

    let mut restored = instance();
    restored
        .restore(&StateSnapshot::decode(&bytes).unwrap())
        .unwrap();
    let mut skipped = 0;
    for e in &events {
        match restored.offer(e).unwrap() {
            Offer::Processed(out) => outputs.extend(out),
            Offer::Duplicate => skipped += 1,
        }
    }
    println!(
        "replayed {} events, {skipped} already covered",
        events.len()
    );

    let mut uninterrupted = instance();
    let mut expected = Vec::new();
    for e in &events {
        expected.extend(uninterrupted.process(e).unwrap());
    }
    assert_eq!(outputs, expected);
    assert_eq!(
        restored.state_hash().unwrap(),
        uninterrupted.state_hash().unwrap()
    );
    println!(
        "{} outputs, identical to the uninterrupted run",
        outputs.len()
    );
}
