//! Stateful operator runtime.
//!
//! An [`OperatorInstance`] owns one partition of one operator: the logic,
//! the partition's keyed state store and its [`PartitionState`] (timestamp
//! vector + emission counter). Processing is a deterministic fold, and output
//! timestamps are a pure function of the ordered input, so two replicas fed
//! the same sequence emit byte-identical events.

use std::collections::BTreeMap;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::enclave::EnclaveError;
use crate::event::{Event, SourceId, Timestamp, TimestampVector};

pub type Params = BTreeMap<String, String>;

pub const DEFAULT_FANOUT_BITS: u8 = 16;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct LogicError(pub String);

impl LogicError {
    pub fn new(msg: impl Into<String>) -> Self {
        LogicError(msg.into())
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("operator logic failed: {0}")]
    LogicFailure(LogicError),
    #[error("partition halted after earlier failure: {0}")]
    Halted(String),
    #[error("state serialization failed: {0}")]
    SerializationFailure(String),
    #[error("snapshot hash does not verify")]
    HashMismatch,
    #[error("snapshot version mismatch: {0}")]
    VersionMismatch(String),
    #[error("output timestamp space exhausted for input ts {input_ts}")]
    FanoutOverflow { input_ts: Timestamp },
    #[error("unknown operator logic `{0}`")]
    UnknownLogic(String),
    #[error("invalid parameters for `{logic}`: {reason}")]
    BadParams { logic: String, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Key/value pairs of a store, sorted by key.
pub type Entries = Vec<(Vec<u8>, Vec<u8>)>;

/// Keyed byte store behind every operator's user state.
pub trait StateStore {
    fn get(&mut self, key: &[u8]) -> Result<Option<Vec<u8>>, StoreError>;
    fn put(&mut self, key: &[u8], value: Vec<u8>) -> Result<(), StoreError>;
    fn remove(&mut self, key: &[u8]) -> Result<(), StoreError>;
    /// All entries sorted by key.
    fn entries(&mut self) -> Result<Entries, StoreError>;
    fn clear(&mut self) -> Result<(), StoreError>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemStore {
    map: BTreeMap<Vec<u8>, Vec<u8>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl StateStore for MemStore {
    fn get(&mut self, key: &[u8]) -> Result<Option<Vec<u8>>, StoreError> {
        Ok(self.map.get(key).cloned())
    }

    fn put(&mut self, key: &[u8], value: Vec<u8>) -> Result<(), StoreError> {
        self.map.insert(key.to_vec(), value);
        Ok(())
    }

    fn remove(&mut self, key: &[u8]) -> Result<(), StoreError> {
        self.map.remove(key);
        Ok(())
    }

    fn entries(&mut self) -> Result<Vec<(Vec<u8>, Vec<u8>)>, StoreError> {
        Ok(self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect())
    }

    fn clear(&mut self) -> Result<(), StoreError> {
        self.map.clear();
        Ok(())
    }
}

/// Write overlay so a failing logic call leaves the base store untouched.
struct Staged<'a, S: StateStore> {
    base: &'a mut S,
    overlay: BTreeMap<Vec<u8>, Option<Vec<u8>>>,
}

impl<'a, S: StateStore> Staged<'a, S> {
    fn new(base: &'a mut S) -> Self {
        Staged {
            base,
            overlay: BTreeMap::new(),
        }
    }

    fn commit(self) -> Result<(), StoreError> {
        for (key, value) in self.overlay {
            match value {
                Some(v) => self.base.put(&key, v)?,
                None => self.base.remove(&key)?,
            }
        }
        Ok(())
    }
}

impl<S: StateStore> StateStore for Staged<'_, S> {
    fn get(&mut self, key: &[u8]) -> Result<Option<Vec<u8>>, StoreError> {
        match self.overlay.get(key) {
            Some(v) => Ok(v.clone()),
            None => self.base.get(key),
        }
    }

    fn put(&mut self, key: &[u8], value: Vec<u8>) -> Result<(), StoreError> {
        self.overlay.insert(key.to_vec(), Some(value));
        Ok(())
    }

    fn remove(&mut self, key: &[u8]) -> Result<(), StoreError> {
        self.overlay.insert(key.to_vec(), None);
        Ok(())
    }

    fn entries(&mut self) -> Result<Vec<(Vec<u8>, Vec<u8>)>, StoreError> {
        let mut all: BTreeMap<Vec<u8>, Vec<u8>> = self.base.entries()?.into_iter().collect();
        for (k, v) in &self.overlay {
            match v {
                Some(v) => all.insert(k.clone(), v.clone()),
                None => all.remove(k),
            };
        }
        Ok(all.into_iter().collect())
    }

    fn clear(&mut self) -> Result<(), StoreError> {
        for (k, _) in self.base.entries()? {
            self.overlay.insert(k, None);
        }
        for v in self.overlay.values_mut() {
            *v = None;
        }
        Ok(())
    }
}

/// One output of a logic call; the runtime assigns source and timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Output {
    pub key: Vec<u8>,
    pub payload: Vec<u8>,
}

/// A deterministic operator. All mutable state lives in the store handed
/// to [`process`](OperatorLogic::process); the logic value itself only
/// carries configuration.
pub trait OperatorLogic: Send {
    fn logic_id(&self) -> &str;

    /// Version of the user-state encoding this logic writes.
    fn format_version(&self) -> u8 {
        1
    }

    /// Must not perform I/O, and must not depend on anything except the
    /// store contents and the event.
    fn process(
        &self,
        store: &mut dyn StateStore,
        event: &Event,
        out: &mut Vec<Output>,
    ) -> Result<(), LogicError>;
}

pub type LogicFactory = fn(&Params) -> Result<Box<dyn OperatorLogic>, RuntimeError>;

#[derive(Clone, Default)]
pub struct LogicRegistry {
    factories: BTreeMap<String, LogicFactory>,
}

impl fmt::Debug for LogicRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.factories.keys()).finish()
    }
}

impl LogicRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, logic_id: &str, factory: LogicFactory) -> &mut Self {
        self.factories.insert(logic_id.to_string(), factory);
        self
    }

    pub fn contains(&self, logic_id: &str) -> bool {
        self.factories.contains_key(logic_id)
    }

    pub fn build(
        &self,
        logic_id: &str,
        params: &Params,
    ) -> Result<Box<dyn OperatorLogic>, RuntimeError> {
        let factory = self
            .factories
            .get(logic_id)
            .ok_or_else(|| RuntimeError::UnknownLogic(logic_id.to_string()))?;
        factory(params)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorDescriptor {
    pub op_id: u64,
    pub name: String,
    pub commutative: bool,
    pub parallelism: u32,
    pub logic_id: String,
    pub params: Params,
}

impl OperatorDescriptor {
    pub fn partition_of(&self, key: &[u8]) -> u32 {
        partition_for_key(key, self.parallelism)
    }
}

/// FNV-1a over the key bytes. Stable across platforms and runs.
pub fn key_hash(key: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in key {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn partition_for_key(key: &[u8], parallelism: u32) -> u32 {
    (key_hash(key) % parallelism.max(1) as u64) as u32
}

/// `(input_ts << fanout_bits) + (out_seq mod 2^fanout_bits)`.
pub fn output_timestamp(input_ts: Timestamp, out_seq: u64, fanout_bits: u8) -> Timestamp {
    let mask = (1u64 << fanout_bits) - 1;
    Timestamp((input_ts.0 << fanout_bits) + (out_seq & mask))
}

/// Watermark an operator may forward once its input low watermark reached
/// `input_low`: every later output comes from an input above it.
pub fn output_watermark(input_low: Timestamp, fanout_bits: u8) -> Timestamp {
    if input_low == Timestamp::MAX {
        Timestamp::MAX
    } else {
        Timestamp(((input_low.0 + 1) << fanout_bits) - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionState {
    pub op_id: u64,
    pub partition: u32,
    pub tv: TimestampVector,
    pub out_seq: u64,
}

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"SM3G";
pub const SNAPSHOT_VERSION: u8 = 1;
/// Magic, version, op id, partition, out_seq.
pub const SNAPSHOT_HEADER_LEN: usize = 4 + 1 + 8 + 4 + 8;

/// Self-contained, hash-protected copy of one partition's state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSnapshot {
    pub op_id: u64,
    pub partition: u32,
    pub tv: TimestampVector,
    pub out_seq: u64,
    pub user_state: Vec<u8>,
    pub state_hash: [u8; 32],
}

impl StateSnapshot {
    fn build(state: &PartitionState, user_state: Vec<u8>) -> Self {
        let mut snap = StateSnapshot {
            op_id: state.op_id,
            partition: state.partition,
            tv: state.tv.clone(),
            out_seq: state.out_seq,
            user_state,
            state_hash: [0; 32],
        };
        snap.state_hash = Sha256::digest(snap.body_bytes()).into();
        snap
    }

    pub fn header_bytes(&self) -> Vec<u8> {
        snapshot_header(self.op_id, self.partition, self.out_seq)
    }

    fn body_bytes(&self) -> Vec<u8> {
        let mut out = self.header_bytes();
        out.extend_from_slice(&(self.tv.len() as u32).to_be_bytes());
        for (source, ts) in self.tv.iter() {
            out.extend_from_slice(&source.0.to_be_bytes());
            out.extend_from_slice(&ts.0.to_be_bytes());
        }
        out.extend_from_slice(&(self.user_state.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.user_state);
        out
    }

    /// File/wire form: body followed by the 32-byte hash of the body.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.body_bytes();
        out.extend_from_slice(&self.state_hash);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<StateSnapshot, RuntimeError> {
        if bytes.len() < SNAPSHOT_HEADER_LEN + 4 + 4 + 32 {
            return Err(RuntimeError::HashMismatch);
        }
        let (body, hash) = bytes.split_at(bytes.len() - 32);
        let digest: [u8; 32] = Sha256::digest(body).into();
        if digest != hash {
            return Err(RuntimeError::HashMismatch);
        }
        let malformed = |what: &str| RuntimeError::SerializationFailure(format!("snapshot {what}"));
        if &body[..4] != SNAPSHOT_MAGIC {
            return Err(malformed("magic"));
        }
        if body[4] != SNAPSHOT_VERSION {
            return Err(RuntimeError::VersionMismatch(format!(
                "snapshot format version {}",
                body[4]
            )));
        }
        let mut cur = Cursor::new(&body[5..]);
        let op_id = cur.u64().ok_or_else(|| malformed("op id"))?;
        let partition = cur.u32().ok_or_else(|| malformed("partition"))?;
        let out_seq = cur.u64().ok_or_else(|| malformed("out_seq"))?;
        let count = cur.u32().ok_or_else(|| malformed("tv count"))?;
        let mut tv = TimestampVector::new();
        for _ in 0..count {
            let s = cur.u64().ok_or_else(|| malformed("tv entry"))?;
            let t = cur.u64().ok_or_else(|| malformed("tv entry"))?;
            tv.advance(SourceId(s), Timestamp(t));
        }
        let len = cur.u32().ok_or_else(|| malformed("state length"))? as usize;
        let user_state = cur
            .take(len)
            .ok_or_else(|| malformed("state bytes"))?
            .to_vec();
        if !cur.is_empty() {
            return Err(malformed("trailing bytes"));
        }
        Ok(StateSnapshot {
            op_id,
            partition,
            tv,
            out_seq,
            user_state,
            state_hash: digest,
        })
    }
}

pub fn snapshot_header(op_id: u64, partition: u32, out_seq: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(SNAPSHOT_HEADER_LEN);
    out.extend_from_slice(SNAPSHOT_MAGIC);
    out.push(SNAPSHOT_VERSION);
    out.extend_from_slice(&op_id.to_be_bytes());
    out.extend_from_slice(&partition.to_be_bytes());
    out.extend_from_slice(&out_seq.to_be_bytes());
    out
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes }
    }

    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.bytes.len() < n {
            return None;
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Some(head)
    }

    pub(crate) fn u16(&mut self) -> Option<u16> {
        self.take(2)
            .map(|b| u16::from_be_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_be_bytes(b.try_into().unwrap()))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// Versioned envelope around a store's entries: logic id, format version,
/// then length-prefixed key/value pairs in key order.
fn encode_user_state(logic_id: &str, version: u8, entries: &[(Vec<u8>, Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(logic_id.len() as u16).to_be_bytes());
    out.extend_from_slice(logic_id.as_bytes());
    out.push(version);
    out.extend_from_slice(&(entries.len() as u32).to_be_bytes());
    for (k, v) in entries {
        out.extend_from_slice(&(k.len() as u32).to_be_bytes());
        out.extend_from_slice(k);
        out.extend_from_slice(&(v.len() as u32).to_be_bytes());
        out.extend_from_slice(v);
    }
    out
}

fn decode_user_state(bytes: &[u8], logic_id: &str, version: u8) -> Result<Entries, RuntimeError> {
    let bad = || RuntimeError::SerializationFailure("user state envelope".into());
    let mut cur = Cursor::new(bytes);
    let id_len = cur.u16().ok_or_else(bad)? as usize;
    let id = cur.take(id_len).ok_or_else(bad)?;
    if id != logic_id.as_bytes() {
        return Err(RuntimeError::VersionMismatch(format!(
            "state written by `{}`, restoring into `{logic_id}`",
            String::from_utf8_lossy(id)
        )));
    }
    let found = cur.take(1).ok_or_else(bad)?[0];
    if found != version {
        return Err(RuntimeError::VersionMismatch(format!(
            "`{logic_id}` state format {found}, expected {version}"
        )));
    }
    let count = cur.u32().ok_or_else(bad)?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let kl = cur.u32().ok_or_else(bad)? as usize;
        let k = cur.take(kl).ok_or_else(bad)?.to_vec();
        let vl = cur.u32().ok_or_else(bad)? as usize;
        let v = cur.take(vl).ok_or_else(bad)?.to_vec();
        entries.push((k, v));
    }
    if !cur.is_empty() {
        return Err(bad());
    }
    Ok(entries)
}

/// Result of offering a delivered event to an instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Offer {
    Processed(Vec<Event>),
    /// Already reflected in the timestamp vector; nothing was applied.
    Duplicate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InstanceCounters {
    pub processed: u64,
    pub duplicates_dropped: u64,
    pub emitted: u64,
}

pub struct OperatorInstance<S: StateStore> {
    logic: Box<dyn OperatorLogic>,
    state: PartitionState,
    store: S,
    fanout_bits: u8,
    last_out: Option<Timestamp>,
    halted: Option<String>,
    counters: InstanceCounters,
}

impl<S: StateStore> fmt::Debug for OperatorInstance<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorInstance")
            .field("logic", &self.logic.logic_id())
            .field("state", &self.state)
            .field("halted", &self.halted)
            .finish_non_exhaustive()
    }
}

impl<S: StateStore> OperatorInstance<S> {
    pub fn new(
        op_id: u64,
        partition: u32,
        logic: Box<dyn OperatorLogic>,
        store: S,
        fanout_bits: u8,
    ) -> Self {
        assert!((1..=32).contains(&fanout_bits), "fanout_bits out of range");
        OperatorInstance {
            logic,
            state: PartitionState {
                op_id,
                partition,
                tv: TimestampVector::new(),
                out_seq: 0,
            },
            store,
            fanout_bits,
            last_out: None,
            halted: None,
            counters: InstanceCounters::default(),
        }
    }

    pub fn state(&self) -> &PartitionState {
        &self.state
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut S {
        &mut self.store
    }

    pub fn counters(&self) -> InstanceCounters {
        self.counters
    }

    pub fn logic_id(&self) -> &str {
        self.logic.logic_id()
    }

    pub fn output_source(&self) -> SourceId {
        SourceId::operator_stream(self.state.op_id, self.state.partition)
    }

    pub fn fanout_bits(&self) -> u8 {
        self.fanout_bits
    }

    /// Drops the event if the timestamp vector already covers it,
    /// otherwise processes it.
    pub fn offer(&mut self, event: &Event) -> Result<Offer, RuntimeError> {
        if self.state.tv.is_duplicate(event) {
            self.counters.duplicates_dropped += 1;
            return Ok(Offer::Duplicate);
        }
        self.process(event).map(Offer::Processed)
    }

    /// Applies one data event. The caller guarantees it is not a duplicate
    /// and that events arrive in the merge layer's order. On error the
    /// partition state is left exactly as it was.
    pub fn process(&mut self, event: &Event) -> Result<Vec<Event>, RuntimeError> {
        if let Some(reason) = &self.halted {
            return Err(RuntimeError::Halted(reason.clone()));
        }
        debug_assert!(event.is_data());
        debug_assert!(!self.state.tv.is_duplicate(event));

        let source = self.output_source();
        let mut outputs = Vec::new();
        let mut staged = Staged::new(&mut self.store);
        if let Err(err) = self.logic.process(&mut staged, event, &mut outputs) {
            self.halted = Some(err.0.clone());
            return Err(RuntimeError::LogicFailure(err));
        }
        if outputs.len() as u64 >= 1u64 << self.fanout_bits {
            return Err(RuntimeError::FanoutOverflow { input_ts: event.ts });
        }
        let mut last = self.last_out;
        let mut emitted = Vec::with_capacity(outputs.len());
        for (i, out) in outputs.into_iter().enumerate() {
            let ts = output_timestamp(event.ts, self.state.out_seq + i as u64, self.fanout_bits);
            if last.is_some_and(|prev| ts <= prev) {
                return Err(RuntimeError::FanoutOverflow { input_ts: event.ts });
            }
            last = Some(ts);
            emitted.push(Event::data(source, ts, out.key, out.payload));
        }
        staged.commit()?;
        self.last_out = last;
        self.state.tv.advance(event.source, event.ts);
        self.state.out_seq += emitted.len() as u64;
        self.counters.processed += 1;
        self.counters.emitted += emitted.len() as u64;
        Ok(emitted)
    }

    pub fn snapshot(&mut self) -> Result<StateSnapshot, RuntimeError> {
        let entries = self.store.entries()?;
        let user_state =
            encode_user_state(self.logic.logic_id(), self.logic.format_version(), &entries);
        Ok(StateSnapshot::build(&self.state, user_state))
    }

    pub fn state_hash(&mut self) -> Result<[u8; 32], RuntimeError> {
        Ok(self.snapshot()?.state_hash)
    }

    /// Replaces this instance's state with the snapshot's. The snapshot
    /// must belong to the same operator partition and logic.
    pub fn restore(&mut self, snapshot: &StateSnapshot) -> Result<(), RuntimeError> {
        let expected: [u8; 32] = Sha256::digest(snapshot.body_bytes()).into();
        if expected != snapshot.state_hash {
            return Err(RuntimeError::HashMismatch);
        }
        if snapshot.op_id != self.state.op_id || snapshot.partition != self.state.partition {
            return Err(RuntimeError::VersionMismatch(format!(
                "snapshot of op {} partition {} restored into op {} partition {}",
                snapshot.op_id, snapshot.partition, self.state.op_id, self.state.partition
            )));
        }
        let entries = decode_user_state(
            &snapshot.user_state,
            self.logic.logic_id(),
            self.logic.format_version(),
        )?;
        self.store.clear()?;
        for (k, v) in entries {
            self.store.put(&k, v)?;
        }
        self.state.tv = snapshot.tv.clone();
        self.state.out_seq = snapshot.out_seq;
        self.last_out = None;
        self.halted = None;
        Ok(())
    }
}
