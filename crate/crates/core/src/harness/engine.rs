//! The simulated cluster.
//!
//! Sources, operator replicas and the sink live on nodes of a [`SimNet`].
//! Each logical step the engine emits due source events, starts scripted
//! migrations, delivers due messages, lets every replica process what its
//! merge buffer releases, advances migrations and finally drains the sink.
//!
//! Outputs of a partition always travel on the link that starts at the
//! partition's home node, whichever replica produced them. Both replicas of
//! a migrating partition therefore share one FIFO stream towards each
//! consumer, and the consumer's per-stream high-water mark drops the
//! doubled outputs.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::enclave::{
    measure, policy_by_name, EnclaveContext, EnclaveError, EnclaveStore, KeyProvisioner, PeerId,
    SealedBlob, SecureChannels,
};
use crate::event::{Event, SourceId, Timestamp, TimestampVector};
use crate::harness::diff::diff_logs;
use crate::harness::oracle::OracleRun;
use crate::harness::report::{
    EventCounts, LatencySummary, MigrationSummary, Probes, ResidencySummary, RunReport, Verdict,
};
use crate::harness::scenario::{ConfigError, Scenario, Upstream};
use crate::migration::{
    Migration, MigrationCoordinator, MigrationError, MigrationHost, MigrationPlan, Outcome,
};
use crate::ordering::{MergeBuffer, StallDetector};
use crate::runtime::{
    output_watermark, partition_for_key, LogicRegistry, MemStore, Offer, OperatorInstance,
    StateSnapshot, StateStore, StoreError,
};
use crate::simnet::{NodeId, SimNet};
use crate::workloads::{standard_registry, Emitted};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("startup failed: {0}")]
    Startup(String),
    #[error("stall at step {step}: {detail}")]
    Stall { step: u64, detail: String },
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl RunError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Startup(_) | RunError::Stall { .. } => 2,
            RunError::Internal(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Record one line per network delivery.
    pub trace: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub sink_log: Vec<Event>,
    pub trace: Vec<String>,
}

const SINK_PEER: PeerId = 1;
const GATEWAY_PEER_BASE: PeerId = 0x100;
const REPLICA_PEER_BASE: PeerId = 0x1_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endpoint {
    Replica {
        op: usize,
        partition: u32,
        peer: PeerId,
    },
    Sink,
}

impl Endpoint {
    fn peer(self) -> PeerId {
        match self {
            Endpoint::Replica { peer, .. } => peer,
            Endpoint::Sink => SINK_PEER,
        }
    }
}

#[derive(Debug, Clone)]
enum Body {
    Plain(Event),
    Sealed(Vec<u8>),
    Snapshot(Vec<u8>),
}

#[derive(Debug, Clone)]
struct Message {
    sender: PeerId,
    to: Endpoint,
    body: Body,
}

/// State store of a replica: plain memory, or paged inside an enclave.
#[derive(Debug)]
pub enum ReplicaStore {
    Mem(MemStore),
    Enclave(Box<EnclaveStore>),
}

impl StateStore for ReplicaStore {
    fn get(&mut self, key: &[u8]) -> Result<Option<Vec<u8>>, StoreError> {
        match self {
            ReplicaStore::Mem(s) => s.get(key),
            ReplicaStore::Enclave(s) => s.get(key),
        }
    }
    fn put(&mut self, key: &[u8], value: Vec<u8>) -> Result<(), StoreError> {
        match self {
            ReplicaStore::Mem(s) => s.put(key, value),
            ReplicaStore::Enclave(s) => s.put(key, value),
        }
    }
    fn remove(&mut self, key: &[u8]) -> Result<(), StoreError> {
        match self {
            ReplicaStore::Mem(s) => s.remove(key),
            ReplicaStore::Enclave(s) => s.remove(key),
        }
    }
    fn entries(&mut self) -> Result<Vec<(Vec<u8>, Vec<u8>)>, StoreError> {
        match self {
            ReplicaStore::Mem(s) => s.entries(),
            ReplicaStore::Enclave(s) => s.entries(),
        }
    }
    fn clear(&mut self) -> Result<(), StoreError> {
        match self {
            ReplicaStore::Mem(s) => s.clear(),
            ReplicaStore::Enclave(s) => s.clear(),
        }
    }
}

/// Per-stream high-water marks of data already admitted.
#[derive(Debug, Default)]
struct Ingress {
    highest: BTreeMap<SourceId, Timestamp>,
}

impl Ingress {
    fn admit(&mut self, event: &Event) -> bool {
        if !event.is_data() {
            return true;
        }
        match self.highest.get(&event.source) {
            Some(&h) if event.ts <= h => false,
            _ => {
                self.highest.insert(event.source, event.ts);
                true
            }
        }
    }
}

struct Replica {
    peer: PeerId,
    node: NodeId,
    instance: OperatorInstance<ReplicaStore>,
    buffer: MergeBuffer,
    ingress: Ingress,
    restored: bool,
    emitted_low: Option<Timestamp>,
    stall: StallDetector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Original,
    Candidate,
}

struct Partition {
    home: NodeId,
    original: Replica,
    candidate: Option<Replica>,
    duplicating: bool,
    /// Newest data timestamp routed to the owner, per source.
    routed: BTreeMap<SourceId, Timestamp>,
    dup_inputs: u64,
    candidate_drops: u64,
    corrupt_transfer: bool,
    /// Output timestamps of (original, candidate) since the snapshot.
    overlap: Option<(BTreeSet<Timestamp>, BTreeSet<Timestamp>)>,
    last_overlap: u64,
}

impl Partition {
    fn close_overlap(&mut self) {
        if let Some((a, b)) = self.overlap.take() {
            self.last_overlap = a.intersection(&b).count() as u64;
        }
    }

    fn replica(&self, role: Role) -> Option<&Replica> {
        match role {
            Role::Original => Some(&self.original),
            Role::Candidate => self.candidate.as_ref(),
        }
    }

    fn replica_mut(&mut self, role: Role) -> Option<&mut Replica> {
        match role {
            Role::Original => Some(&mut self.original),
            Role::Candidate => self.candidate.as_mut(),
        }
    }

    fn by_peer(&mut self, peer: PeerId) -> Option<&mut Replica> {
        if self.original.peer == peer {
            return Some(&mut self.original);
        }
        self.candidate.as_mut().filter(|c| c.peer == peer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Consumer {
    Operator(usize),
    Sink,
}

struct OperatorInfo {
    op_id: u64,
    parallelism: u32,
    relaxed: bool,
    expected_sources: Vec<SourceId>,
    consumers: Vec<Consumer>,
    /// Operators between the sources and this one's output, inclusive.
    depth: u32,
    expected_measurement: Option<[u8; 32]>,
}

struct Gateway {
    node: NodeId,
    peer: PeerId,
    events: Vec<Emitted>,
    cursor: usize,
    consumers: Vec<Consumer>,
}

struct SinkState {
    node: NodeId,
    buffer: MergeBuffer,
    ingress: Ingress,
    log: Vec<Event>,
    stall: StallDetector,
    /// (emission step of the originating input, latency in steps).
    latencies: Vec<(u64, u64)>,
}

#[derive(Default)]
struct Stats {
    events: EventCounts,
    probes: Probes,
    residency_released: u64,
    residency_total: u64,
    residency_max: u64,
}

struct Cluster<'s> {
    scenario: &'s Scenario,
    registry: LogicRegistry,
    net: SimNet<Message>,
    nodes: BTreeSet<NodeId>,
    failed: BTreeSet<NodeId>,
    gateways: Vec<Gateway>,
    plug_gateway: BTreeMap<SourceId, usize>,
    operators: Vec<OperatorInfo>,
    partitions: BTreeMap<(usize, u32), Partition>,
    sink: SinkState,
    channels: BTreeMap<PeerId, SecureChannels>,
    provisioner: KeyProvisioner,
    last_wm: BTreeMap<SourceId, Timestamp>,
    next_peer: PeerId,
    stats: Stats,
    trace: Option<Vec<String>>,
    sentinel: Option<Vec<u8>>,
    snapshot_arrivals: Vec<(usize, u32, Result<(), MigrationError>)>,
}

fn occurrences(haystack: &[u8], needle: &[u8]) -> u64 {
    if needle.is_empty() || haystack.len() < needle.len() {
        return 0;
    }
    haystack
        .windows(needle.len())
        .filter(|w| *w == needle)
        .count() as u64
}

fn decode_operator_stream(source: SourceId) -> (u64, u32) {
    ((source.0 >> 32) & 0x7fff_ffff, source.0 as u32)
}

impl<'s> Cluster<'s> {
    fn new(scenario: &'s Scenario, trace: bool) -> Result<Self, RunError> {
        let registry = standard_registry();
        scenario.validate(&registry)?;
        let mut net = SimNet::new(scenario.seed);
        for link in scenario.links() {
            net.configure(link)
                .map_err(|e| RunError::Startup(e.to_string()))?;
        }

        let consumers_of = |name: &str| -> Vec<Consumer> {
            let mut c: Vec<Consumer> = scenario
                .operators
                .iter()
                .enumerate()
                .filter(|(_, o)| o.inputs.iter().any(|i| i == name))
                .map(|(j, _)| Consumer::Operator(j))
                .collect();
            if scenario.sink.inputs.iter().any(|i| i == name) {
                c.push(Consumer::Sink);
            }
            c
        };

        let mut gateways = Vec::new();
        let mut plug_gateway = BTreeMap::new();
        for (i, s) in scenario.sources.iter().enumerate() {
            let generator = scenario.generator(i);
            for source in generator.sources() {
                plug_gateway.insert(source, i);
            }
            gateways.push(Gateway {
                node: NodeId(s.node),
                peer: GATEWAY_PEER_BASE + i as u64,
                events: generator.generate(),
                cursor: 0,
                consumers: consumers_of(&s.name),
            });
        }

        let stream_sources = |operators: &[OperatorInfo], name: &str| -> Vec<SourceId> {
            match scenario.resolve(name) {
                Some(Upstream::Source(i)) => scenario.generator(i).sources(),
                Some(Upstream::Operator(j)) => (0..operators[j].parallelism)
                    .map(|p| SourceId::operator_stream(operators[j].op_id, p))
                    .collect(),
                None => Vec::new(),
            }
        };

        let mut operators: Vec<OperatorInfo> = Vec::new();
        for (i, op) in scenario.operators.iter().enumerate() {
            let expected_sources = op
                .inputs
                .iter()
                .flat_map(|name| stream_sources(&operators, name))
                .collect();
            let depth = 1 + op
                .inputs
                .iter()
                .filter_map(|name| match scenario.resolve(name) {
                    Some(Upstream::Operator(j)) => Some(operators[j].depth),
                    _ => None,
                })
                .max()
                .unwrap_or(0);
            let expected_measurement = op.expected_measurement.as_ref().map(|h| {
                let mut m = [0u8; 32];
                hex::decode_to_slice(h, &mut m).expect("validated hex");
                m
            });
            operators.push(OperatorInfo {
                op_id: Scenario::op_id(i),
                parallelism: op.nodes.len() as u32,
                relaxed: op.relaxed,
                expected_sources,
                consumers: consumers_of(&op.name),
                depth,
                expected_measurement,
            });
        }

        let sink_sources: Vec<SourceId> = scenario
            .sink
            .inputs
            .iter()
            .flat_map(|name| stream_sources(&operators, name))
            .collect();

        let enclave = &scenario.enclave;
        let mut cluster = Cluster {
            scenario,
            registry,
            net,
            nodes: scenario.nodes(),
            failed: scenario
                .cluster
                .failed_nodes
                .iter()
                .map(|&n| NodeId(n))
                .collect(),
            gateways,
            plug_gateway,
            operators,
            partitions: BTreeMap::new(),
            sink: SinkState {
                node: NodeId(scenario.sink.node),
                buffer: MergeBuffer::new(sink_sources),
                ingress: Ingress::default(),
                log: Vec::new(),
                stall: StallDetector::new(scenario.stall_steps),
                latencies: Vec::new(),
            },
            channels: BTreeMap::new(),
            provisioner: KeyProvisioner::new(enclave.key_seed.as_bytes()),
            last_wm: BTreeMap::new(),
            next_peer: REPLICA_PEER_BASE,
            stats: Stats::default(),
            trace: trace.then(Vec::new),
            sentinel: enclave
                .sentinel
                .as_ref()
                .filter(|_| enclave.enabled)
                .map(|s| s.as_bytes().to_vec()),
            snapshot_arrivals: Vec::new(),
        };
        if enclave.enabled {
            cluster.stats.probes.budget_bytes = Some(enclave.memory_budget_bytes);
            if cluster.sentinel.is_some() {
                cluster.stats.probes.sentinel_leaks = Some(0);
            }
        }

        for (i, op) in scenario.operators.iter().enumerate() {
            for (p, &node) in op.nodes.iter().enumerate() {
                let replica = cluster
                    .new_replica(i, p as u32, NodeId(node))
                    .map_err(RunError::Startup)?;
                cluster.partitions.insert(
                    (i, p as u32),
                    Partition {
                        home: NodeId(node),
                        original: replica,
                        candidate: None,
                        duplicating: false,
                        routed: BTreeMap::new(),
                        dup_inputs: 0,
                        candidate_drops: 0,
                        corrupt_transfer: false,
                        overlap: None,
                        last_overlap: 0,
                    },
                );
            }
        }
        Ok(cluster)
    }

    fn enclave_on(&self) -> bool {
        self.scenario.enclave.enabled
    }

    fn new_replica(&mut self, op: usize, partition: u32, node: NodeId) -> Result<Replica, String> {
        let cfg = &self.scenario.operators[op];
        let info = &self.operators[op];
        let params = self.scenario.params(op);
        let peer = self.next_peer;
        self.next_peer += 1;
        let logic = self
            .registry
            .build(&cfg.logic, &params)
            .map_err(|e| format!("operator '{}': {e}", cfg.name))?;
        let store = if self.enclave_on() {
            let enclave = &self.scenario.enclave;
            let ctx = EnclaveContext::new(
                peer as u32,
                peer,
                self.provisioner.sealing_key(info.op_id),
                enclave.memory_budget_bytes,
                measure(&cfg.logic, &params),
            );
            if let Some(expected) = &info.expected_measurement {
                if !ctx.attest(expected) {
                    return Err(format!(
                        "attestation failed for operator '{}' on {node}",
                        cfg.name
                    ));
                }
            }
            let policy = policy_by_name(&enclave.policy).expect("validated policy");
            ReplicaStore::Enclave(Box::new(EnclaveStore::new(
                ctx,
                enclave.page_frame_bytes,
                policy,
            )))
        } else {
            ReplicaStore::Mem(MemStore::new())
        };
        Ok(Replica {
            peer,
            node,
            instance: OperatorInstance::new(
                info.op_id,
                partition,
                logic,
                store,
                self.scenario.fanout_bits,
            ),
            buffer: MergeBuffer::new(info.expected_sources.iter().copied()),
            ingress: Ingress::default(),
            restored: true,
            emitted_low: None,
            stall: StallDetector::new(self.scenario.stall_steps),
        })
    }

    fn internal(&mut self, message: String) {
        self.stats.probes.internal_errors.push(message);
    }

    fn scan(&mut self, bytes: &[u8]) {
        if let Some(sentinel) = &self.sentinel {
            let hits = occurrences(bytes, sentinel);
            if let Some(leaks) = self.stats.probes.sentinel_leaks.as_mut() {
                *leaks += hits;
            }
            self.stats.probes.bytes_scanned += bytes.len() as u64;
        }
    }

    fn transmit(
        &mut self,
        link_from: NodeId,
        sender: PeerId,
        to_node: NodeId,
        to: Endpoint,
        event: &Event,
    ) {
        let body = if self.enclave_on() {
            let to_peer = to.peer();
            let key = self.provisioner.channel_key(sender, to_peer);
            let channels = self
                .channels
                .entry(sender)
                .or_insert_with(|| SecureChannels::new(sender));
            if !channels.has_peer(to_peer) {
                channels.add_peer(to_peer, key);
            }
            match channels.encrypt_event(event, to_peer) {
                Ok(wire) => {
                    self.scan(&wire);
                    Body::Sealed(wire)
                }
                Err(e) => {
                    self.internal(format!("encrypting for peer {to_peer}: {e}"));
                    return;
                }
            }
        } else {
            Body::Plain(event.clone())
        };
        let message = Message { sender, to, body };
        match self.net.send(link_from, to_node, message) {
            Ok(()) => self.stats.events.messages_sent += 1,
            Err(e) => self.internal(e.to_string()),
        }
    }

    fn consumers(&self, source: SourceId) -> Vec<Consumer> {
        if source.is_operator_stream() {
            let (op_id, _) = decode_operator_stream(source);
            self.operators[op_id as usize - 1].consumers.clone()
        } else {
            self.gateways[self.plug_gateway[&source]].consumers.clone()
        }
    }

    /// Sends an event of stream `event.source` to every consumer replica.
    fn route(&mut self, link_from: NodeId, sender: PeerId, event: &Event) {
        if !event.is_data() {
            let wm = self.last_wm.entry(event.source).or_insert(event.ts);
            *wm = (*wm).max(event.ts);
        }
        for consumer in self.consumers(event.source) {
            match consumer {
                Consumer::Sink => {
                    let node = self.sink.node;
                    self.transmit(link_from, sender, node, Endpoint::Sink, event);
                }
                Consumer::Operator(op) => {
                    let parallelism = self.operators[op].parallelism;
                    let targets: Vec<u32> = if event.is_data() {
                        vec![partition_for_key(&event.key, parallelism)]
                    } else {
                        (0..parallelism).collect()
                    };
                    for p in targets {
                        let part = self.partitions.get_mut(&(op, p)).expect("partition exists");
                        let mut dests = vec![(part.original.node, part.original.peer)];
                        if event.is_data() {
                            part.routed.insert(event.source, event.ts);
                        }
                        if part.duplicating {
                            if let Some(c) = &part.candidate {
                                dests.push((c.node, c.peer));
                                if event.is_data() {
                                    part.dup_inputs += 1;
                                }
                            }
                        }
                        for (node, peer) in dests {
                            let to = Endpoint::Replica {
                                op,
                                partition: p,
                                peer,
                            };
                            self.transmit(link_from, sender, node, to, event);
                        }
                    }
                }
            }
        }
    }

    fn emit_sources(&mut self, step: u64) {
        for g in 0..self.gateways.len() {
            loop {
                let gw = &mut self.gateways[g];
                let Some(next) = gw.events.get(gw.cursor).filter(|e| e.step <= step) else {
                    break;
                };
                let event = next.event.clone();
                gw.cursor += 1;
                let (node, peer) = (gw.node, gw.peer);
                if event.is_data() {
                    self.stats.events.generated += 1;
                }
                self.route(node, peer, &event);
            }
        }
    }

    fn sources_exhausted(&self) -> bool {
        self.gateways.iter().all(|g| g.cursor == g.events.len())
    }

    fn deliver(&mut self, step: u64) {
        for d in self.net.deliver_due() {
            self.stats.events.messages_delivered += 1;
            let Message { sender, to, body } = d.message;
            let event = match body {
                Body::Snapshot(bytes) => {
                    if let Some(t) = self.trace.as_mut() {
                        t.push(format!(
                            "step={step} link={}->{} snapshot bytes={}",
                            d.from,
                            d.to,
                            bytes.len()
                        ));
                    }
                    self.receive_snapshot(to, bytes);
                    continue;
                }
                Body::Plain(event) => event,
                Body::Sealed(wire) => {
                    if let Endpoint::Replica {
                        op,
                        partition,
                        peer,
                    } = to
                    {
                        let alive = self
                            .partitions
                            .get_mut(&(op, partition))
                            .and_then(|p| p.by_peer(peer))
                            .is_some();
                        if !alive {
                            self.stats.events.orphaned_messages += 1;
                            continue;
                        }
                    }
                    let me = to.peer();
                    let key = self.provisioner.channel_key(me, sender);
                    let channels = self
                        .channels
                        .entry(me)
                        .or_insert_with(|| SecureChannels::new(me));
                    if !channels.has_peer(sender) {
                        channels.add_peer(sender, key);
                    }
                    match channels.decrypt_event(&wire, sender) {
                        Ok(event) => event,
                        Err(EnclaveError::ReplayDetected { .. }) => {
                            self.stats.events.replay_drops += 1;
                            continue;
                        }
                        Err(_) => {
                            self.stats.probes.authentication_failures += 1;
                            continue;
                        }
                    }
                }
            };
            if let Some(t) = self.trace.as_mut() {
                t.push(format!(
                    "step={step} link={}->{} {} ts={} {}{}",
                    d.from,
                    d.to,
                    event.source,
                    event.ts,
                    if event.is_data() { "data" } else { "watermark" },
                    if d.duplicate { " dup" } else { "" }
                ));
            }
            let (ingress, buffer) = match to {
                Endpoint::Sink => (&mut self.sink.ingress, &mut self.sink.buffer),
                Endpoint::Replica {
                    op,
                    partition,
                    peer,
                } => {
                    match self
                        .partitions
                        .get_mut(&(op, partition))
                        .and_then(|p| p.by_peer(peer))
                    {
                        Some(r) => (&mut r.ingress, &mut r.buffer),
                        None => {
                            self.stats.events.orphaned_messages += 1;
                            continue;
                        }
                    }
                }
            };
            if !ingress.admit(&event) {
                if d.duplicate {
                    self.stats.events.transport_duplicates_dropped += 1;
                } else {
                    self.stats.events.replica_duplicates_dropped += 1;
                }
                continue;
            }
            buffer.set_clock(step);
            if let Err(e) = buffer.ingest(event) {
                self.internal(format!("ingest at {to:?}: {e}"));
            }
        }
    }

    fn receive_snapshot(&mut self, to: Endpoint, bytes: Vec<u8>) {
        let Endpoint::Replica {
            op,
            partition,
            peer,
        } = to
        else {
            return;
        };
        let op_id = self.operators[op].op_id;
        let enclave = self.enclave_on();
        let Some(part) = self.partitions.get_mut(&(op, partition)) else {
            return;
        };
        let Some(candidate) = part.candidate.as_mut().filter(|c| c.peer == peer) else {
            self.stats.events.orphaned_messages += 1;
            return;
        };
        let snapshot = if enclave {
            let ReplicaStore::Enclave(store) = candidate.instance.store() else {
                unreachable!("enclave replicas use enclave stores")
            };
            store
                .ctx
                .unseal_bytes(&bytes, op_id, partition)
                .map_err(|e| e.to_string())
        } else {
            StateSnapshot::decode(&bytes).map_err(|e| e.to_string())
        };
        let result = snapshot
            .and_then(|s| candidate.instance.restore(&s).map_err(|e| e.to_string()))
            .map_err(MigrationError::SnapshotFailure);
        if result.is_ok() {
            candidate.restored = true;
            candidate.stall = StallDetector::new(self.scenario.stall_steps);
        }
        self.snapshot_arrivals.push((op, partition, result));
    }

    /// Lets every replica process what its buffer releases. Returns the
    /// outputs with the role of the replica that produced them.
    fn process_partitions(&mut self, step: u64) -> Vec<(usize, u32, Role, Event)> {
        let bits = self.scenario.fanout_bits;
        let mut produced = Vec::new();
        let mut errors = Vec::new();
        let keys: Vec<(usize, u32)> = self.partitions.keys().copied().collect();
        for (op, p) in keys {
            let relaxed = self.operators[op].relaxed;
            let part = self.partitions.get_mut(&(op, p)).expect("listed key");
            for role in [Role::Original, Role::Candidate] {
                let Some(replica) = part.replica_mut(role) else {
                    continue;
                };
                if !replica.restored {
                    continue;
                }
                replica.buffer.set_clock(step);
                let inputs = if relaxed {
                    replica.buffer.drain_relaxed()
                } else {
                    replica.buffer.drain()
                };
                let mut outputs = Vec::new();
                let mut drops = 0;
                for e in &inputs {
                    match replica.instance.offer(e) {
                        Ok(Offer::Processed(out)) => outputs.extend(out),
                        Ok(Offer::Duplicate) => drops += 1,
                        Err(err) => {
                            errors.push(format!("operator {} partition {p}: {err}", op + 1));
                            break;
                        }
                    }
                }
                if let Some(low) = replica.buffer.low_watermark() {
                    if replica.emitted_low != Some(low) {
                        replica.emitted_low = Some(low);
                        outputs.push(Event::watermark(
                            replica.instance.output_source(),
                            output_watermark(low, bits),
                        ));
                    }
                }
                if role == Role::Candidate {
                    part.candidate_drops += drops;
                } else if drops > 0 {
                    errors.push(format!(
                        "operator {} partition {p}: serving replica saw {drops} stale input(s)",
                        op + 1
                    ));
                }
                if let Some((a, b)) = part.overlap.as_mut() {
                    let set = if role == Role::Original { a } else { b };
                    set.extend(outputs.iter().filter(|e| e.is_data()).map(|e| e.ts));
                }
                let peer = part.replica(role).expect("replica above").peer;
                produced.extend(outputs.into_iter().map(|e| (op, p, role, peer, e)));
            }
        }
        for e in errors {
            self.internal(e);
        }
        let mut out = Vec::with_capacity(produced.len());
        for (op, p, role, peer, event) in produced {
            let home = self.partitions[&(op, p)].home;
            self.route(home, peer, &event);
            out.push((op, p, role, event));
        }
        out
    }

    fn process_sink(&mut self, step: u64) {
        let bits = self.scenario.fanout_bits as u32;
        self.sink.buffer.set_clock(step);
        let released = self.sink.buffer.drain();
        for e in &released {
            let depth = if e.source.is_operator_stream() {
                let (op_id, _) = decode_operator_stream(e.source);
                self.operators[op_id as usize - 1].depth
            } else {
                0
            };
            let origin = e.ts.0.checked_shr(bits * depth).unwrap_or(0);
            self.sink
                .latencies
                .push((origin, step.saturating_sub(origin)));
        }
        self.sink.log.extend(released);
    }

    /// Probes run at the end of every step.
    fn probe(&mut self, step: u64) -> Result<(), RunError> {
        let mut stall = None;
        for ((op, p), part) in self.partitions.iter_mut() {
            for role in [Role::Original, Role::Candidate] {
                let Some(r) = part.replica_mut(role) else {
                    continue;
                };
                if !r.restored {
                    continue;
                }
                self.stats.probes.deferred_events += r.buffer.releasable() as u64;
                if let Some(s) = r.stall.observe(&r.buffer) {
                    stall.get_or_insert(format!(
                        "operator {} partition {p} ({role:?}) waits on {:?} with {} event(s) pending",
                        op + 1,
                        s.blocking,
                        s.pending
                    ));
                }
                if let ReplicaStore::Enclave(store) = r.instance.store() {
                    let resident = store.pages.stats().resident_bytes;
                    self.stats.probes.max_resident_bytes =
                        self.stats.probes.max_resident_bytes.max(resident);
                    if resident > store.pages.budget() {
                        self.stats.probes.budget_violations += 1;
                    }
                }
            }
        }
        if let Some(s) = self.sink.stall.observe(&self.sink.buffer) {
            stall.get_or_insert(format!(
                "sink waits on {:?} with {} event(s) pending",
                s.blocking, s.pending
            ));
        }
        match stall {
            Some(detail) => Err(RunError::Stall { step, detail }),
            None => Ok(()),
        }
    }

    fn quiescent(&self) -> bool {
        self.sources_exhausted()
            && self.net.is_idle()
            && self.sink.buffer.pending() == 0
            && self.sink.buffer.low_watermark() == Some(Timestamp::MAX)
    }

    /// Folds a replica that is going away into the run statistics.
    fn retire_stats(&mut self, replica: &Replica) {
        let res = replica.buffer.residency();
        self.stats.residency_released += res.released;
        self.stats.residency_total += res.total_steps;
        self.stats.residency_max = self.stats.residency_max.max(res.max_steps);
        if let ReplicaStore::Enclave(store) = replica.instance.store() {
            let s = store.pages.stats();
            self.stats.probes.evictions += s.evictions;
            self.stats.probes.faults += s.faults;
            let blobs: Vec<Vec<u8>> = store
                .pages
                .backing_blobs()
                .map(SealedBlob::encode)
                .collect();
            for b in blobs {
                self.scan(&b);
            }
        }
    }

    fn original_emitted_max(&self, op: usize, p: u32) -> bool {
        self.partitions[&(op, p)].original.emitted_low == Some(Timestamp::MAX)
    }

    fn part(&mut self, plan: &MigrationPlan) -> &mut Partition {
        self.partitions
            .get_mut(&(plan.op_id as usize - 1, plan.partition))
            .expect("plan names an existing partition")
    }
}

impl MigrationHost for Cluster<'_> {
    fn node_available(&self, node: NodeId) -> bool {
        self.nodes.contains(&node) && !self.failed.contains(&node)
    }

    fn spawn_candidate(&mut self, plan: &MigrationPlan) -> Result<(), MigrationError> {
        let op = plan.op_id as usize - 1;
        let mut replica = self
            .new_replica(op, plan.partition, plan.target_node)
            .map_err(MigrationError::InvalidPlan)?;
        replica.restored = false;
        let part = self.part(plan);
        part.candidate = Some(replica);
        part.dup_inputs = 0;
        part.candidate_drops = 0;
        part.last_overlap = 0;
        Ok(())
    }

    fn start_duplication(&mut self, plan: &MigrationPlan) -> BTreeMap<SourceId, Timestamp> {
        let op = plan.op_id as usize - 1;
        let part = self.part(plan);
        part.duplicating = true;
        let frontier = part.routed.clone();
        let candidate = part.candidate.as_ref().map(|c| (c.node, c.peer));
        let Some((node, peer)) = candidate else {
            return frontier;
        };
        // The candidate missed earlier watermarks; repeat the latest ones.
        let to = Endpoint::Replica {
            op,
            partition: plan.partition,
            peer,
        };
        for source in self.operators[op].expected_sources.clone() {
            let Some(&wm) = self.last_wm.get(&source) else {
                continue;
            };
            let (link_from, sender) = if source.is_operator_stream() {
                let (op_id, p) = decode_operator_stream(source);
                let up = &self.partitions[&(op_id as usize - 1, p)];
                (up.home, up.original.peer)
            } else {
                let g = &self.gateways[self.plug_gateway[&source]];
                (g.node, g.peer)
            };
            self.transmit(link_from, sender, node, to, &Event::watermark(source, wm));
        }
        frontier
    }

    fn original_tv(&self, plan: &MigrationPlan) -> TimestampVector {
        self.partitions[&(plan.op_id as usize - 1, plan.partition)]
            .original
            .instance
            .state()
            .tv
            .clone()
    }

    fn send_snapshot(&mut self, plan: &MigrationPlan) -> Result<(), MigrationError> {
        let enclave = self.enclave_on();
        let part = self.part(plan);
        let failure = |e: String| MigrationError::SnapshotFailure(e);
        let snapshot = part
            .original
            .instance
            .snapshot()
            .map_err(|e| failure(e.to_string()))?;
        let mut bytes = match part.original.instance.store_mut() {
            ReplicaStore::Enclave(store) if enclave => store.ctx.seal(&snapshot).encode(),
            _ => snapshot.encode(),
        };
        if part.corrupt_transfer {
            let at = bytes.len() / 2;
            bytes[at] ^= 0x10;
        }
        let Some(candidate) = part.candidate.as_ref() else {
            return Err(failure("candidate vanished".into()));
        };
        let to = Endpoint::Replica {
            op: plan.op_id as usize - 1,
            partition: plan.partition,
            peer: candidate.peer,
        };
        let (from, target, sender) = (part.original.node, candidate.node, part.original.peer);
        part.overlap = Some(Default::default());
        if enclave {
            self.scan(&bytes);
        }
        let message = Message {
            sender,
            to,
            body: Body::Snapshot(bytes),
        };
        self.net
            .send(from, target, message)
            .map_err(|e| failure(e.to_string()))?;
        self.stats.events.messages_sent += 1;
        Ok(())
    }

    fn replica_tvs(&self, plan: &MigrationPlan) -> (TimestampVector, TimestampVector) {
        let part = &self.partitions[&(plan.op_id as usize - 1, plan.partition)];
        let b = part
            .candidate
            .as_ref()
            .map(|c| c.instance.state().tv.clone())
            .unwrap_or_default();
        (part.original.instance.state().tv.clone(), b)
    }

    fn state_hashes(
        &mut self,
        plan: &MigrationPlan,
    ) -> Result<([u8; 32], [u8; 32]), MigrationError> {
        let part = self.part(plan);
        let fail = |e: crate::runtime::RuntimeError| MigrationError::SnapshotFailure(e.to_string());
        let a = part.original.instance.state_hash().map_err(fail)?;
        let b = part
            .candidate
            .as_mut()
            .ok_or_else(|| MigrationError::SnapshotFailure("no candidate".into()))?
            .instance
            .state_hash()
            .map_err(fail)?;
        Ok((a, b))
    }

    fn stop_duplication(&mut self, plan: &MigrationPlan) {
        self.part(plan).duplicating = false;
    }

    fn destroy_candidate(&mut self, plan: &MigrationPlan) {
        let part = self.part(plan);
        part.close_overlap();
        if let Some(c) = part.candidate.take() {
            self.retire_stats(&c);
        }
    }

    fn retire_original(&mut self, plan: &MigrationPlan) {
        let part = self.part(plan);
        part.close_overlap();
        let Some(candidate) = part.candidate.take() else {
            return;
        };
        let old = std::mem::replace(&mut part.original, candidate);
        self.retire_stats(&old);
    }
}

fn summarize(
    scenario: &Scenario,
    migration: &Migration,
    overlap: u64,
    finished_at: Option<u64>,
) -> MigrationSummary {
    let plan = migration.plan();
    let (outcome, reason, divergence, checked) = match migration.outcome() {
        Some(Outcome::Switched { state_hash_checked }) => {
            ("switched", None, false, *state_hash_checked)
        }
        Some(Outcome::RolledBack { reason, divergence }) => {
            ("rolled_back", Some(reason.clone()), *divergence, false)
        }
        None => ("unfinished", None, false, false),
    };
    MigrationSummary {
        operator: scenario.operators[plan.op_id as usize - 1].name.clone(),
        op_id: plan.op_id,
        partition: plan.partition,
        source_node: plan.source_node.0,
        target_node: plan.target_node.0,
        requested_at: plan.started_at,
        outcome: outcome.into(),
        reason,
        divergence,
        state_hash_checked: checked,
        counters: migration.counters,
        overlap_outputs: overlap,
        finished_at,
        timeline: migration
            .timeline()
            .iter()
            .map(ToString::to_string)
            .collect(),
    }
}

/// Runs a scenario and compares the sink log with `oracle`.
pub fn run_scenario(
    scenario: &Scenario,
    oracle: &OracleRun,
    options: RunOptions,
) -> Result<RunOutcome, RunError> {
    let mut cluster = Cluster::new(scenario, options.trace)?;
    let mut coordinator = MigrationCoordinator::new();
    let mut summaries: Vec<MigrationSummary> = Vec::new();
    let mut windows: Vec<(u64, u64)> = Vec::new();
    let limit = scenario.run_steps + scenario.stall_steps.max(scenario.run_steps);
    let mut step = 0;

    let sync_counters = |coordinator: &mut MigrationCoordinator, cluster: &Cluster| {
        for (op_id, p) in coordinator.active_keys() {
            let part = &cluster.partitions[&(op_id as usize - 1, p)];
            let m = coordinator.get_mut(op_id, p).expect("active key");
            m.counters.duplicated_inputs = part.dup_inputs;
            m.counters.dropped_duplicates = part.candidate_drops;
        }
    };
    let mut reported = 0;
    let mut collect = |coordinator: &mut MigrationCoordinator,
                       cluster: &Cluster,
                       summaries: &mut Vec<MigrationSummary>,
                       windows: &mut Vec<(u64, u64)>,
                       step: u64| {
        coordinator.collect_finished();
        let finished = coordinator.finished();
        for m in &finished[reported..] {
            let plan = m.plan();
            let overlap =
                cluster.partitions[&(plan.op_id as usize - 1, plan.partition)].last_overlap;
            windows.push((plan.started_at, step));
            summaries.push(summarize(scenario, m, overlap, Some(step)));
        }
        reported = finished.len();
    };

    loop {
        step += 1;
        cluster.net.advance();
        cluster.emit_sources(step);

        for m in scenario.migrations.iter().filter(|m| m.at_step == step) {
            let op = scenario
                .operator_index(&m.operator)
                .expect("validated operator");
            let part = cluster
                .partitions
                .get_mut(&(op, m.partition))
                .expect("validated partition");
            part.corrupt_transfer = m.corrupt_transfer;
            let plan = MigrationPlan {
                op_id: Scenario::op_id(op),
                partition: m.partition,
                source_node: part.original.node,
                target_node: NodeId(m.target_node),
                sync_window: m.sync_window.unwrap_or(scenario.sync_window),
                started_at: step,
            };
            if let Err(err) = coordinator.start(plan.clone(), &mut cluster) {
                summaries.push(MigrationSummary {
                    operator: m.operator.clone(),
                    op_id: plan.op_id,
                    partition: plan.partition,
                    source_node: plan.source_node.0,
                    target_node: plan.target_node.0,
                    requested_at: step,
                    outcome: "refused".into(),
                    reason: Some(err.to_string()),
                    divergence: false,
                    state_hash_checked: false,
                    counters: Default::default(),
                    overlap_outputs: 0,
                    finished_at: Some(step),
                    timeline: Vec::new(),
                });
            }
        }

        cluster.deliver(step);
        sync_counters(&mut coordinator, &cluster);
        for (op, p, result) in std::mem::take(&mut cluster.snapshot_arrivals) {
            if let Some(m) = coordinator.get_mut(Scenario::op_id(op), p) {
                let _ = m.snapshot_restored(&mut cluster, step, result);
            }
        }
        collect(
            &mut coordinator,
            &cluster,
            &mut summaries,
            &mut windows,
            step,
        );

        for (op, p, role, event) in cluster.process_partitions(step) {
            if let Some(m) = coordinator.get_mut(Scenario::op_id(op), p) {
                match role {
                    Role::Original => m.record_original(&event),
                    Role::Candidate => m.record_candidate(&event),
                }
            }
        }

        sync_counters(&mut coordinator, &cluster);
        coordinator.poll(&mut cluster, step);
        // A stream that closed before the snapshot will not close again.
        for (op_id, p) in coordinator.active_keys() {
            let closed = cluster.original_emitted_max(op_id as usize - 1, p);
            let m = coordinator.get_mut(op_id, p).expect("active key");
            if closed && m.records_original() {
                m.record_original(&Event::watermark(
                    SourceId::operator_stream(op_id, p),
                    Timestamp::MAX,
                ));
            }
        }
        collect(
            &mut coordinator,
            &cluster,
            &mut summaries,
            &mut windows,
            step,
        );

        cluster.process_sink(step);
        cluster.probe(step)?;
        if !cluster.stats.probes.internal_errors.is_empty() {
            return Err(RunError::Internal(
                cluster.stats.probes.internal_errors.join("; "),
            ));
        }

        if step >= scenario.run_steps && cluster.quiescent() && !coordinator.is_active() {
            break;
        }
        if step >= limit {
            return Err(RunError::Stall {
                step,
                detail: format!(
                    "run did not settle: {} message(s) in flight, {} event(s) at the sink, {} migration(s) active",
                    cluster.net.in_flight(),
                    cluster.sink.buffer.pending(),
                    coordinator.active_keys().len()
                ),
            });
        }
    }

    let mut final_state_hashes = BTreeMap::new();
    for ((op, p), mut part) in std::mem::take(&mut cluster.partitions) {
        let hash = part
            .original
            .instance
            .state_hash()
            .map_err(|e| RunError::Internal(e.to_string()))?;
        final_state_hashes.insert(
            format!("{}/p{p}", scenario.operators[op].name),
            hex::encode(hash),
        );
        cluster.retire_stats(&part.original);
    }
    let res = cluster.sink.buffer.residency();
    cluster.stats.residency_released += res.released;
    cluster.stats.residency_total += res.total_steps;
    cluster.stats.residency_max = cluster.stats.residency_max.max(res.max_steps);

    let sink_log = std::mem::take(&mut cluster.sink.log);
    let latency = latency_summary(&cluster.sink.latencies, &windows);
    let mut stats = std::mem::take(&mut cluster.stats);
    stats.events.sink_outputs = sink_log.len() as u64;
    stats.events.oracle_outputs = oracle.sink_log.len() as u64;
    let mut report = RunReport {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        enclave: scenario.enclave.enabled,
        steps: step,
        events: stats.events,
        migrations: summaries,
        diff: diff_logs(&oracle.sink_log, &sink_log),
        probes: stats.probes,
        latency,
        residency: ResidencySummary {
            released: stats.residency_released,
            mean_steps: if stats.residency_released == 0 {
                0.0
            } else {
                stats.residency_total as f64 / stats.residency_released as f64
            },
            max_steps: stats.residency_max,
        },
        final_state_hashes,
        verdict: Verdict::Pass,
        failures: Vec::new(),
    };
    report.judge();
    Ok(RunOutcome {
        report,
        sink_log,
        trace: cluster.trace.take().unwrap_or_default(),
    })
}

fn latency_summary(latencies: &[(u64, u64)], windows: &[(u64, u64)]) -> LatencySummary {
    let mut summary = LatencySummary::default();
    let mut total = 0u64;
    for &(origin, latency) in latencies {
        *summary.histogram.entry(latency).or_insert(0) += 1;
        total += latency;
        summary.max = summary.max.max(latency);
        if windows.iter().any(|&(a, b)| (a..=b).contains(&origin)) {
            let during = summary.max_during_migration.get_or_insert(0);
            *during = (*during).max(latency);
        } else {
            summary.max_outside_migration = summary.max_outside_migration.max(latency);
        }
    }
    if !latencies.is_empty() {
        summary.mean = total as f64 / latencies.len() as f64;
    }
    summary
}
