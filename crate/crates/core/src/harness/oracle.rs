//! Reference execution.
//!
//! Every generated data event is sorted by `(ts, source)` and folded
//! through each operator partition in one thread, with in-memory state and
//! no network, merge buffer, replica or enclave. The sink log is the union
//! of the sink's input streams in the same order. Operator logic is the
//! only code shared with the engine.

use std::collections::BTreeMap;

use crate::event::{Event, SourceId};
use crate::harness::scenario::{Scenario, Upstream};
use crate::runtime::{
    output_timestamp, partition_for_key, MemStore, OperatorLogic, Output, RuntimeError,
};
use crate::workloads::standard_registry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleRun {
    /// Data outputs of each operator, in total order.
    pub operator_outputs: Vec<Vec<Event>>,
    /// What the sink must write.
    pub sink_log: Vec<Event>,
}

fn by_order(events: &mut [Event]) {
    events.sort_by_key(|e| (e.ts, e.source));
}

pub fn run_oracle(scenario: &Scenario) -> Result<OracleRun, RuntimeError> {
    let registry = standard_registry();
    let source_events: Vec<Vec<Event>> = (0..scenario.sources.len())
        .map(|i| {
            scenario
                .generator(i)
                .generate()
                .into_iter()
                .map(|e| e.event)
                .filter(Event::is_data)
                .collect()
        })
        .collect();

    let stream = |outputs: &[Vec<Event>], name: &str| -> Vec<Event> {
        match scenario.resolve(name) {
            Some(Upstream::Source(i)) => source_events[i].clone(),
            Some(Upstream::Operator(i)) => outputs[i].clone(),
            None => Vec::new(),
        }
    };

    let mut operator_outputs: Vec<Vec<Event>> = Vec::new();
    for (index, op) in scenario.operators.iter().enumerate() {
        let op_id = Scenario::op_id(index);
        let parallelism = op.nodes.len() as u32;
        let mut input: Vec<Event> = op
            .inputs
            .iter()
            .flat_map(|name| stream(&operator_outputs, name))
            .collect();
        by_order(&mut input);

        let logics: Vec<Box<dyn OperatorLogic>> = (0..parallelism)
            .map(|_| registry.build(&op.logic, &scenario.params(index)))
            .collect::<Result<_, _>>()?;
        let mut stores: Vec<MemStore> = (0..parallelism).map(|_| MemStore::new()).collect();
        let mut out_seq = vec![0u64; parallelism as usize];
        let mut produced = Vec::new();
        for event in &input {
            let p = partition_for_key(&event.key, parallelism) as usize;
            let mut outs: Vec<Output> = Vec::new();
            logics[p]
                .process(&mut stores[p], event, &mut outs)
                .map_err(RuntimeError::LogicFailure)?;
            for out in outs {
                let ts = output_timestamp(event.ts, out_seq[p], scenario.fanout_bits);
                out_seq[p] += 1;
                produced.push(Event::data(
                    SourceId::operator_stream(op_id, p as u32),
                    ts,
                    out.key,
                    out.payload,
                ));
            }
        }
        by_order(&mut produced);
        operator_outputs.push(produced);
    }

    let mut sink_log: Vec<Event> = scenario
        .sink
        .inputs
        .iter()
        .flat_map(|name| stream(&operator_outputs, name))
        .collect();
    by_order(&mut sink_log);
    Ok(OracleRun {
        operator_outputs,
        sink_log,
    })
}

/// Per-stream counts of a log, for reports.
pub fn stream_counts(log: &[Event]) -> BTreeMap<SourceId, usize> {
    let mut counts = BTreeMap::new();
    for e in log {
        *counts.entry(e.source).or_insert(0) += 1;
    }
    counts
}
