//! Live migration of one operator partition.
//!
//! The coordinator walks a partition through
//! `Single -> Duplicating -> Snapshotting -> Syncing -> Switched`:
//!
//! 1. a candidate replica with empty state is spawned on the target node and
//!    upstream starts sending every input of the partition to both replicas;
//! 2. once the original has processed everything that was routed to it
//!    alone, its snapshot is shipped to the candidate;
//! 3. the candidate restores it, discards buffered inputs the snapshot
//!    already covers and starts processing;
//! 4. outputs of both replicas are compared by output timestamp until
//!    `sync_window` of them matched, then the original is retired.
//!
//! Any failure before the switch rolls back to the original. Both replicas
//! publish on the same logical output stream, so downstream consumers drop
//! the doubled outputs of the overlap with their own timestamp vectors.
//!
//! The coordinator does not own replicas or the network; it drives them
//! through [`MigrationHost`].

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::event::{Event, SourceId, Timestamp, TimestampVector};
use crate::simnet::NodeId;

pub const DEFAULT_SYNC_WINDOW: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum MigrationPhase {
    Single,
    Duplicating,
    Snapshotting,
    Syncing,
    Switched,
}

impl fmt::Display for MigrationPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MigrationPhase::Single => "single",
            MigrationPhase::Duplicating => "duplicating",
            MigrationPhase::Snapshotting => "snapshotting",
            MigrationPhase::Syncing => "syncing",
            MigrationPhase::Switched => "switched",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MigrationError {
    #[error("target node {0} is not available")]
    TargetUnavailable(NodeId),
    #[error("operator {op_id} partition {partition} is already migrating")]
    AlreadyMigrating { op_id: u64, partition: u32 },
    #[error("invalid migration plan: {0}")]
    InvalidPlan(String),
    #[error("snapshot transfer failed: {0}")]
    SnapshotFailure(String),
    #[error("replicas diverged at output ts {ts}")]
    Divergence { ts: Timestamp },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MigrationPlan {
    pub op_id: u64,
    pub partition: u32,
    pub source_node: NodeId,
    pub target_node: NodeId,
    pub sync_window: usize,
    pub started_at: u64,
}

impl MigrationPlan {
    pub fn validate(&self) -> Result<(), MigrationError> {
        if self.source_node == self.target_node {
            return Err(MigrationError::InvalidPlan(format!(
                "source and target are both {}",
                self.source_node
            )));
        }
        if self.sync_window == 0 {
            return Err(MigrationError::InvalidPlan(
                "sync_window must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Outputs of the two replicas awaiting comparison.
#[derive(Debug, Clone, Default)]
pub struct ReplicaPair {
    original: VecDeque<Event>,
    candidate: VecDeque<Event>,
    matched: usize,
    original_closed: bool,
    candidate_closed: bool,
}

impl ReplicaPair {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_original(&mut self, event: Event) {
        self.original.push_back(event);
    }

    pub fn push_candidate(&mut self, event: Event) {
        self.candidate.push_back(event);
    }

    /// Marks the original's output stream as finished.
    pub fn close_original(&mut self) {
        self.original_closed = true;
    }

    pub fn close_candidate(&mut self) {
        self.candidate_closed = true;
    }

    pub fn matched(&self) -> usize {
        self.matched
    }

    pub fn waiting(&self) -> (usize, usize) {
        (self.original.len(), self.candidate.len())
    }
}

/// Consumes comparable outputs of both logs in timestamp lockstep.
///
/// Returns `true` once at least `window` outputs matched byte for byte, or
/// once both streams are closed with nothing left unmatched. An output of
/// one replica that the other has already skipped past is treated like a
/// byte mismatch.
pub fn check_sync(pair: &mut ReplicaPair, window: usize) -> Result<bool, MigrationError> {
    while let (Some(a), Some(b)) = (pair.original.front(), pair.candidate.front()) {
        if a.ts != b.ts || a != b {
            return Err(MigrationError::Divergence { ts: a.ts.min(b.ts) });
        }
        pair.original.pop_front();
        pair.candidate.pop_front();
        pair.matched += 1;
    }
    if pair.matched >= window {
        return Ok(true);
    }
    let drained = pair.original.is_empty() && pair.candidate.is_empty();
    if pair.original_closed && pair.candidate_closed {
        if !drained {
            let ts = pair
                .original
                .front()
                .or(pair.candidate.front())
                .map(|e| e.ts)
                .unwrap_or(Timestamp::ZERO);
            return Err(MigrationError::Divergence { ts });
        }
        return Ok(true);
    }
    Ok(false)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MigrationCounters {
    /// Inputs routed to the candidate.
    pub duplicated_inputs: u64,
    /// Candidate inputs discarded as already covered by the snapshot.
    pub dropped_duplicates: u64,
    pub compared_outputs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PhaseChange {
    pub step: u64,
    pub op_id: u64,
    pub partition: u32,
    pub from: MigrationPhase,
    pub to: MigrationPhase,
    pub counters: MigrationCounters,
    pub note: Option<String>,
}

impl fmt::Display for PhaseChange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} op={} partition={} {}->{} duplicated_inputs={} dropped_duplicates={} compared_outputs={}",
            self.step,
            self.op_id,
            self.partition,
            self.from,
            self.to,
            self.counters.duplicated_inputs,
            self.counters.dropped_duplicates,
            self.counters.compared_outputs
        )?;
        if let Some(note) = &self.note {
            write!(f, " note=\"{note}\"")?;
        }
        Ok(())
    }
}

/// The replicas and routing a migration manipulates.
pub trait MigrationHost {
    fn node_available(&self, node: NodeId) -> bool;
    /// Creates the candidate on the target node with empty state.
    fn spawn_candidate(&mut self, plan: &MigrationPlan) -> Result<(), MigrationError>;
    /// Starts sending the partition's inputs to the candidate as well.
    /// Returns, per input source, the newest data timestamp routed to the
    /// original alone.
    fn start_duplication(&mut self, plan: &MigrationPlan) -> BTreeMap<SourceId, Timestamp>;
    fn original_tv(&self, plan: &MigrationPlan) -> TimestampVector;
    /// Snapshots the original and ships it to the candidate. Completion is
    /// reported through [`Migration::snapshot_restored`].
    fn send_snapshot(&mut self, plan: &MigrationPlan) -> Result<(), MigrationError>;
    /// Timestamp vectors of (original, candidate).
    fn replica_tvs(&self, plan: &MigrationPlan) -> (TimestampVector, TimestampVector);
    /// State hashes of (original, candidate).
    fn state_hashes(
        &mut self,
        plan: &MigrationPlan,
    ) -> Result<([u8; 32], [u8; 32]), MigrationError>;
    fn stop_duplication(&mut self, plan: &MigrationPlan);
    fn destroy_candidate(&mut self, plan: &MigrationPlan);
    /// Tears down the original; the candidate becomes the partition owner.
    fn retire_original(&mut self, plan: &MigrationPlan);
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Outcome {
    Switched { state_hash_checked: bool },
    RolledBack { reason: String, divergence: bool },
}

#[derive(Debug, Clone)]
pub struct Migration {
    plan: MigrationPlan,
    phase: MigrationPhase,
    frontier: BTreeMap<SourceId, Timestamp>,
    pair: ReplicaPair,
    pub counters: MigrationCounters,
    timeline: Vec<PhaseChange>,
    outcome: Option<Outcome>,
}

impl Migration {
    /// Spawns the candidate and starts duplicating input.
    pub fn start(
        plan: MigrationPlan,
        host: &mut dyn MigrationHost,
    ) -> Result<Migration, MigrationError> {
        plan.validate()?;
        if !host.node_available(plan.target_node) {
            return Err(MigrationError::TargetUnavailable(plan.target_node));
        }
        host.spawn_candidate(&plan)?;
        let frontier = host.start_duplication(&plan);
        let mut migration = Migration {
            plan,
            phase: MigrationPhase::Single,
            frontier,
            pair: ReplicaPair::new(),
            counters: MigrationCounters::default(),
            timeline: Vec::new(),
            outcome: None,
        };
        let step = migration.plan.started_at;
        migration.transition(step, MigrationPhase::Duplicating, None);
        Ok(migration)
    }

    pub fn plan(&self) -> &MigrationPlan {
        &self.plan
    }

    pub fn phase(&self) -> MigrationPhase {
        self.phase
    }

    pub fn timeline(&self) -> &[PhaseChange] {
        &self.timeline
    }

    pub fn outcome(&self) -> Option<&Outcome> {
        self.outcome.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn frontier(&self) -> &BTreeMap<SourceId, Timestamp> {
        &self.frontier
    }

    /// True while outputs of the original must be kept for comparison.
    pub fn records_original(&self) -> bool {
        matches!(
            self.phase,
            MigrationPhase::Snapshotting | MigrationPhase::Syncing
        )
    }

    pub fn record_original(&mut self, event: &Event) {
        if !self.records_original() {
            return;
        }
        if event.is_data() {
            self.pair.push_original(event.clone());
        } else if event.ts == Timestamp::MAX {
            self.pair.close_original();
        }
    }

    pub fn record_candidate(&mut self, event: &Event) {
        if self.phase != MigrationPhase::Syncing {
            return;
        }
        if event.is_data() {
            self.pair.push_candidate(event.clone());
        } else if event.ts == Timestamp::MAX {
            self.pair.close_candidate();
        }
    }

    fn transition(&mut self, step: u64, to: MigrationPhase, note: Option<String>) {
        self.timeline.push(PhaseChange {
            step,
            op_id: self.plan.op_id,
            partition: self.plan.partition,
            from: self.phase,
            to,
            counters: self.counters,
            note,
        });
        self.phase = to;
    }

    fn frontier_reached(&self, tv: &TimestampVector) -> bool {
        self.frontier.iter().all(|(&s, &ts)| tv.get(s) >= ts)
    }

    /// Advances the protocol as far as the replicas allow. Errors have
    /// already been rolled back when they are returned.
    pub fn poll(&mut self, host: &mut dyn MigrationHost, step: u64) -> Result<(), MigrationError> {
        let result = self.try_poll(host, step);
        if let Err(err) = &result {
            self.abort(host, step, err.clone());
        }
        result
    }

    fn try_poll(&mut self, host: &mut dyn MigrationHost, step: u64) -> Result<(), MigrationError> {
        match self.phase {
            MigrationPhase::Duplicating => {
                if self.frontier_reached(&host.original_tv(&self.plan)) {
                    host.send_snapshot(&self.plan)?;
                    self.transition(step, MigrationPhase::Snapshotting, None);
                }
            }
            MigrationPhase::Syncing => {
                let before = self.pair.matched();
                let synced = check_sync(&mut self.pair, self.plan.sync_window);
                self.counters.compared_outputs += (self.pair.matched() - before) as u64;
                if synced? {
                    self.finalize(host, step)?;
                }
            }
            MigrationPhase::Single | MigrationPhase::Snapshotting | MigrationPhase::Switched => {}
        }
        Ok(())
    }

    /// Called by the host once the candidate has (or has failed to)
    /// restored the shipped snapshot.
    pub fn snapshot_restored(
        &mut self,
        host: &mut dyn MigrationHost,
        step: u64,
        result: Result<(), MigrationError>,
    ) -> Result<(), MigrationError> {
        if self.phase != MigrationPhase::Snapshotting {
            return Ok(());
        }
        match result {
            Ok(()) => {
                self.transition(step, MigrationPhase::Syncing, None);
                Ok(())
            }
            Err(err) => {
                self.abort(host, step, err.clone());
                Err(err)
            }
        }
    }

    /// Retires the original. A second call is a no-op.
    pub fn finalize(
        &mut self,
        host: &mut dyn MigrationHost,
        step: u64,
    ) -> Result<(), MigrationError> {
        if self.phase == MigrationPhase::Switched {
            return Ok(());
        }
        let (tv_a, tv_b) = host.replica_tvs(&self.plan);
        let mut state_hash_checked = false;
        if tv_a == tv_b {
            let (a, b) = host.state_hashes(&self.plan)?;
            if a != b {
                let ts = tv_a
                    .iter()
                    .map(|(_, ts)| ts)
                    .max()
                    .unwrap_or(Timestamp::ZERO);
                return Err(MigrationError::Divergence { ts });
            }
            state_hash_checked = true;
        }
        host.stop_duplication(&self.plan);
        host.retire_original(&self.plan);
        self.transition(step, MigrationPhase::Switched, None);
        self.outcome = Some(Outcome::Switched { state_hash_checked });
        Ok(())
    }

    /// Rolls back to the original replica.
    pub fn abort(&mut self, host: &mut dyn MigrationHost, step: u64, reason: MigrationError) {
        if self.is_finished() {
            return;
        }
        host.destroy_candidate(&self.plan);
        host.stop_duplication(&self.plan);
        let divergence = matches!(reason, MigrationError::Divergence { .. });
        self.transition(step, MigrationPhase::Single, Some(reason.to_string()));
        self.outcome = Some(Outcome::RolledBack {
            reason: reason.to_string(),
            divergence,
        });
    }
}

/// Tracks migrations per partition; at most one active per partition.
#[derive(Debug, Clone, Default)]
pub struct MigrationCoordinator {
    active: BTreeMap<(u64, u32), Migration>,
    finished: Vec<Migration>,
}

impl MigrationCoordinator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn start(
        &mut self,
        plan: MigrationPlan,
        host: &mut dyn MigrationHost,
    ) -> Result<(), MigrationError> {
        let key = (plan.op_id, plan.partition);
        if self.active.contains_key(&key) {
            return Err(MigrationError::AlreadyMigrating {
                op_id: plan.op_id,
                partition: plan.partition,
            });
        }
        let migration = Migration::start(plan, host)?;
        self.active.insert(key, migration);
        Ok(())
    }

    pub fn get_mut(&mut self, op_id: u64, partition: u32) -> Option<&mut Migration> {
        self.active.get_mut(&(op_id, partition))
    }

    pub fn get(&self, op_id: u64, partition: u32) -> Option<&Migration> {
        self.active.get(&(op_id, partition))
    }

    pub fn is_active(&self) -> bool {
        !self.active.is_empty()
    }

    pub fn active_keys(&self) -> Vec<(u64, u32)> {
        self.active.keys().copied().collect()
    }

    /// Polls every active migration, then retires the finished ones.
    /// Returns the errors that caused rollbacks.
    pub fn poll(&mut self, host: &mut dyn MigrationHost, step: u64) -> Vec<MigrationError> {
        let mut errors = Vec::new();
        for migration in self.active.values_mut() {
            if let Err(err) = migration.poll(host, step) {
                errors.push(err);
            }
        }
        self.collect_finished();
        errors
    }

    pub fn collect_finished(&mut self) {
        let done: Vec<_> = self
            .active
            .iter()
            .filter(|(_, m)| m.is_finished())
            .map(|(k, _)| *k)
            .collect();
        for key in done {
            let m = self.active.remove(&key).expect("key listed above");
            self.finished.push(m);
        }
    }

    pub fn finished(&self) -> &[Migration] {
        &self.finished
    }

    /// Every migration, finished ones first.
    pub fn all(&self) -> impl Iterator<Item = &Migration> {
        self.finished.iter().chain(self.active.values())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{MemStore, OperatorInstance, StateSnapshot};
    use crate::workloads::Counter;

    fn out(ts: u64, payload: u8) -> Event {
        Event::data(
            SourceId::operator_stream(1, 0),
            Timestamp(ts),
            vec![],
            vec![payload],
        )
    }

    #[test]
    fn equal_logs_sync() {
        let mut pair = ReplicaPair::new();
        for ts in [100, 101, 102] {
            pair.push_original(out(ts, 1));
            pair.push_candidate(out(ts, 1));
        }
        assert_eq!(check_sync(&mut pair, 3), Ok(true));
    }

    #[test]
    fn lagging_candidate_is_not_yet_in_sync() {
        let mut pair = ReplicaPair::new();
        for ts in [100, 101, 102] {
            pair.push_original(out(ts, 1));
        }
        for ts in [100, 101] {
            pair.push_candidate(out(ts, 1));
        }
        assert_eq!(check_sync(&mut pair, 3), Ok(false));
        pair.push_candidate(out(102, 1));
        assert_eq!(check_sync(&mut pair, 3), Ok(true));
    }

    #[test]
    fn differing_payload_diverges() {
        let mut pair = ReplicaPair::new();
        pair.push_original(out(100, 1));
        pair.push_candidate(out(100, 2));
        assert_eq!(
            check_sync(&mut pair, 3),
            Err(MigrationError::Divergence { ts: Timestamp(100) })
        );
    }

    #[test]
    fn skipped_output_diverges() {
        let mut pair = ReplicaPair::new();
        pair.push_original(out(100, 1));
        pair.push_original(out(101, 1));
        pair.push_candidate(out(101, 1));
        assert!(matches!(
            check_sync(&mut pair, 3),
            Err(MigrationError::Divergence { .. })
        ));
    }

    #[test]
    fn closed_streams_sync_below_window() {
        let mut pair = ReplicaPair::new();
        pair.push_original(out(100, 1));
        pair.push_candidate(out(100, 1));
        pair.close_original();
        assert_eq!(check_sync(&mut pair, 16), Ok(false));
        pair.close_candidate();
        assert_eq!(check_sync(&mut pair, 16), Ok(true));
    }

    #[test]
    fn plan_validation() {
        let mut plan = plan();
        plan.target_node = plan.source_node;
        assert!(matches!(
            plan.validate(),
            Err(MigrationError::InvalidPlan(_))
        ));
        let mut plan = self::plan();
        plan.sync_window = 0;
        assert!(plan.validate().is_err());
    }

    fn plan() -> MigrationPlan {
        MigrationPlan {
            op_id: 1,
            partition: 0,
            source_node: NodeId(1),
            target_node: NodeId(2),
            sync_window: 2,
            started_at: 0,
        }
    }

    /// Two counter replicas fed by hand; snapshot transfer is synchronous.
    struct MockHost {
        original: OperatorInstance<MemStore>,
        candidate: Option<OperatorInstance<MemStore>>,
        candidate_buffer: Vec<Event>,
        duplicating: bool,
        routed_to_original: BTreeMap<SourceId, Timestamp>,
        shipped: Option<Vec<u8>>,
        restored: bool,
        corrupt: bool,
        alive: bool,
        retired: bool,
    }

    fn instance() -> OperatorInstance<MemStore> {
        OperatorInstance::new(1, 0, Box::new(Counter), MemStore::new(), 16)
    }

    impl MockHost {
        fn new() -> Self {
            MockHost {
                original: instance(),
                candidate: None,
                candidate_buffer: Vec::new(),
                duplicating: false,
                routed_to_original: BTreeMap::new(),
                shipped: None,
                restored: false,
                corrupt: false,
                alive: true,
                retired: false,
            }
        }

        /// Routes one input; returns outputs of (original, candidate).
        fn feed(&mut self, m: &mut Migration, e: Event) -> (Vec<Event>, Vec<Event>) {
            self.routed_to_original.insert(e.source, e.ts);
            let a = self.original.process(&e).unwrap();
            for o in &a {
                m.record_original(o);
            }
            let mut b = Vec::new();
            if self.duplicating {
                m.counters.duplicated_inputs += 1;
                self.candidate_buffer.push(e);
                if let Some(c) = self.candidate.as_mut().filter(|_| self.restored) {
                    for e in self.candidate_buffer.drain(..) {
                        match c.offer(&e).unwrap() {
                            crate::runtime::Offer::Processed(out) => b.extend(out),
                            crate::runtime::Offer::Duplicate => m.counters.dropped_duplicates += 1,
                        }
                    }
                }
            }
            for o in &b {
                m.record_candidate(o);
            }
            (a, b)
        }

        fn deliver_snapshot(&mut self, m: &mut Migration, step: u64) {
            let Some(mut bytes) = self.shipped.take() else {
                return;
            };
            if self.corrupt {
                bytes[30] ^= 1;
            }
            let result = StateSnapshot::decode(&bytes)
                .and_then(|s| self.candidate.as_mut().unwrap().restore(&s))
                .map_err(|e| MigrationError::SnapshotFailure(e.to_string()));
            self.restored = result.is_ok();
            let _ = m.snapshot_restored(self, step, result);
        }
    }

    impl MigrationHost for MockHost {
        fn node_available(&self, _node: NodeId) -> bool {
            self.alive
        }
        fn spawn_candidate(&mut self, _plan: &MigrationPlan) -> Result<(), MigrationError> {
            self.candidate = Some(instance());
            Ok(())
        }
        fn start_duplication(&mut self, _plan: &MigrationPlan) -> BTreeMap<SourceId, Timestamp> {
            self.duplicating = true;
            self.routed_to_original.clone()
        }
        fn original_tv(&self, _plan: &MigrationPlan) -> TimestampVector {
            self.original.state().tv.clone()
        }
        fn send_snapshot(&mut self, _plan: &MigrationPlan) -> Result<(), MigrationError> {
            let snap = self
                .original
                .snapshot()
                .map_err(|e| MigrationError::SnapshotFailure(e.to_string()))?;
            self.shipped = Some(snap.encode());
            Ok(())
        }
        fn replica_tvs(&self, _plan: &MigrationPlan) -> (TimestampVector, TimestampVector) {
            (
                self.original.state().tv.clone(),
                self.candidate.as_ref().unwrap().state().tv.clone(),
            )
        }
        fn state_hashes(
            &mut self,
            _plan: &MigrationPlan,
        ) -> Result<([u8; 32], [u8; 32]), MigrationError> {
            let a = self.original.state_hash().unwrap();
            let b = self.candidate.as_mut().unwrap().state_hash().unwrap();
            Ok((a, b))
        }
        fn stop_duplication(&mut self, _plan: &MigrationPlan) {
            self.duplicating = false;
        }
        fn destroy_candidate(&mut self, _plan: &MigrationPlan) {
            self.candidate = None;
        }
        fn retire_original(&mut self, _plan: &MigrationPlan) {
            self.retired = true;
        }
    }

    fn ev(ts: u64) -> Event {
        Event::data(SourceId(7), Timestamp(ts), vec![], vec![])
    }

    #[test]
    fn full_protocol_switches_and_counts() {
        let mut host = MockHost::new();
        let mut coord = MigrationCoordinator::new();
        for ts in 1..=5 {
            host.routed_to_original.insert(SourceId(7), Timestamp(ts));
            host.original.process(&ev(ts)).unwrap();
        }
        coord.start(plan(), &mut host).unwrap();
        assert_eq!(
            coord.start(plan(), &mut host),
            Err(MigrationError::AlreadyMigrating {
                op_id: 1,
                partition: 0
            })
        );
        let m = coord.get_mut(1, 0).unwrap();
        assert_eq!(m.phase(), MigrationPhase::Duplicating);
        assert_eq!(m.frontier().get(&SourceId(7)), Some(&Timestamp(5)));
        for ts in 6..=10 {
            host.feed(m, ev(ts));
        }
        assert_eq!(m.counters.duplicated_inputs, 5);
        m.poll(&mut host, 10).unwrap();
        assert_eq!(m.phase(), MigrationPhase::Snapshotting);
        host.deliver_snapshot(m, 11);
        assert_eq!(m.phase(), MigrationPhase::Syncing);
        // counter emits nothing, so sync comes from closed streams
        for ts in 11..=12 {
            host.feed(m, ev(ts));
        }
        // buffered 6..=10 were covered by the snapshot
        assert_eq!(m.counters.dropped_duplicates, 5);
        m.record_original(&Event::watermark(SourceId(1), Timestamp::MAX));
        m.record_candidate(&Event::watermark(SourceId(1), Timestamp::MAX));
        m.poll(&mut host, 12).unwrap();
        assert_eq!(m.phase(), MigrationPhase::Switched);
        assert_eq!(
            m.outcome(),
            Some(&Outcome::Switched {
                state_hash_checked: true
            })
        );
        m.finalize(&mut host, 13).unwrap();
        assert_eq!(m.timeline().len(), 4);
        assert!(host.retired && !host.duplicating);
        coord.collect_finished();
        assert!(!coord.is_active());
        assert_eq!(coord.finished().len(), 1);
    }

    #[test]
    fn snapshot_waits_for_frontier() {
        let mut host = MockHost::new();
        host.routed_to_original.insert(SourceId(7), Timestamp(3));
        let mut m = Migration::start(plan(), &mut host).unwrap();
        m.poll(&mut host, 1).unwrap();
        assert_eq!(m.phase(), MigrationPhase::Duplicating);
        host.original.process(&ev(3)).unwrap();
        m.poll(&mut host, 2).unwrap();
        assert_eq!(m.phase(), MigrationPhase::Snapshotting);
    }

    #[test]
    fn empty_snapshot_transfers_without_drops() {
        let mut host = MockHost::new();
        let mut m = Migration::start(plan(), &mut host).unwrap();
        m.poll(&mut host, 1).unwrap();
        host.deliver_snapshot(&mut m, 2);
        assert_eq!(m.phase(), MigrationPhase::Syncing);
        assert!(host.candidate.as_ref().unwrap().state().tv.is_empty());
        host.feed(&mut m, ev(1));
        assert_eq!(m.counters.dropped_duplicates, 0);
    }

    #[test]
    fn corrupted_transfer_rolls_back() {
        let mut host = MockHost::new();
        for ts in 1..=5 {
            host.original.process(&ev(ts)).unwrap();
        }
        let before = host.original.state_hash().unwrap();
        host.corrupt = true;
        let mut m = Migration::start(plan(), &mut host).unwrap();
        m.poll(&mut host, 1).unwrap();
        host.deliver_snapshot(&mut m, 2);
        assert_eq!(m.phase(), MigrationPhase::Single);
        assert!(matches!(
            m.outcome(),
            Some(Outcome::RolledBack {
                divergence: false,
                ..
            })
        ));
        assert!(host.candidate.is_none());
        assert!(!host.duplicating);
        assert_eq!(host.original.state_hash().unwrap(), before);
    }

    #[test]
    fn dead_target_is_refused() {
        let mut host = MockHost::new();
        host.alive = false;
        assert_eq!(
            Migration::start(plan(), &mut host).unwrap_err(),
            MigrationError::TargetUnavailable(NodeId(2))
        );
        assert!(host.candidate.is_none());
    }

    #[test]
    fn divergence_rolls_back() {
        let mut host = MockHost::new();
        let mut m = Migration::start(plan(), &mut host).unwrap();
        m.poll(&mut host, 1).unwrap();
        host.deliver_snapshot(&mut m, 2);
        m.record_original(&out(5, 1));
        m.record_candidate(&out(5, 2));
        assert!(matches!(
            m.poll(&mut host, 3),
            Err(MigrationError::Divergence { .. })
        ));
        assert_eq!(m.phase(), MigrationPhase::Single);
        assert!(matches!(
            m.outcome(),
            Some(Outcome::RolledBack {
                divergence: true,
                ..
            })
        ));
    }

    #[test]
    fn phase_change_line_format() {
        let change = PhaseChange {
            step: 4,
            op_id: 1,
            partition: 0,
            from: MigrationPhase::Syncing,
            to: MigrationPhase::Switched,
            counters: MigrationCounters {
                duplicated_inputs: 3,
                dropped_duplicates: 1,
                compared_outputs: 2,
            },
            note: None,
        };
        assert_eq!(
            change.to_string(),
            "step=4 op=1 partition=0 syncing->switched duplicated_inputs=3 dropped_duplicates=1 compared_outputs=2"
        );
    }
}
