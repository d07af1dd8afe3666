//! Events, logical timestamps and timestamp vectors.
//!
//! Every other module builds on these types. An [`Event`] is the unit of
//! exactly-once accounting; a [`TimestampVector`] records, per producer, the
//! highest timestamp already folded into some state and is the duplicate
//! filter used by replicas and downstream consumers alike.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifies an event producer: a plug/meter source or an operator
/// partition's output stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceId(pub u64);

/// Bit marking operator output streams so they can never collide with
/// external source ids.
const OPERATOR_STREAM_BIT: u64 = 1 << 63;

impl SourceId {
    /// The replica-independent output stream id of one operator partition.
    /// Every replica of the partition emits under this id.
    pub fn operator_stream(op_id: u64, partition: u32) -> Self {
        debug_assert!(op_id < (1 << 31));
        SourceId(OPERATOR_STREAM_BIT | (op_id << 32) | partition as u64)
    }

    pub fn is_operator_stream(self) -> bool {
        self.0 & OPERATOR_STREAM_BIT != 0
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_operator_stream() {
            let op = (self.0 & !OPERATOR_STREAM_BIT) >> 32;
            let part = self.0 & 0xffff_ffff;
            write!(f, "op{op}/p{part}")
        } else {
            write!(f, "s{}", self.0)
        }
    }
}

/// Logical time. Strictly increasing along one source's data events.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);
    /// Used as the end-of-stream watermark.
    pub const MAX: Timestamp = Timestamp(u64::MAX);
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Timestamp::MAX {
            f.write_str("max")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Data,
    /// Promise that the source emits no future data event with a timestamp
    /// at or below this one.
    Watermark,
}

impl EventKind {
    fn tag(self) -> u8 {
        match self {
            EventKind::Data => 0,
            EventKind::Watermark => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub source: SourceId,
    pub ts: Timestamp,
    pub key: Vec<u8>,
    pub payload: Vec<u8>,
    pub kind: EventKind,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated event encoding: needed {needed} bytes, had {available}")]
    Truncated { needed: usize, available: usize },
    #[error("unknown event kind tag {0}")]
    BadKind(u8),
    #[error("watermark event carries a key or payload")]
    WatermarkWithBody,
}

/// Fixed part of the encoding: source, ts, kind, key length, payload length.
pub const ENCODED_HEADER_LEN: usize = 8 + 8 + 1 + 4 + 4;

impl Event {
    pub fn data(source: SourceId, ts: Timestamp, key: Vec<u8>, payload: Vec<u8>) -> Self {
        Event {
            source,
            ts,
            key,
            payload,
            kind: EventKind::Data,
        }
    }

    pub fn watermark(source: SourceId, ts: Timestamp) -> Self {
        Event {
            source,
            ts,
            key: Vec::new(),
            payload: Vec::new(),
            kind: EventKind::Watermark,
        }
    }

    pub fn is_data(&self) -> bool {
        self.kind == EventKind::Data
    }

    pub fn encoded_len(&self) -> usize {
        ENCODED_HEADER_LEN + self.key.len() + self.payload.len()
    }

    /// Big-endian, fixed field order: source, ts, kind, key (u32 length
    /// prefix), payload (u32 length prefix).
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.source.0.to_be_bytes());
        out.extend_from_slice(&self.ts.0.to_be_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&(self.key.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.key);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
    }

    /// Decodes one event from the front of `bytes`, returning it together
    /// with the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Event, usize), DecodeError> {
        let mut r = Reader { bytes, pos: 0 };
        let source = SourceId(r.u64()?);
        let ts = Timestamp(r.u64()?);
        let kind = match r.take(1)?[0] {
            0 => EventKind::Data,
            1 => EventKind::Watermark,
            other => return Err(DecodeError::BadKind(other)),
        };
        let key_len = r.u32()? as usize;
        let key = r.take(key_len)?.to_vec();
        let payload_len = r.u32()? as usize;
        let payload = r.take(payload_len)?.to_vec();
        if kind == EventKind::Watermark && !(key.is_empty() && payload.is_empty()) {
            return Err(DecodeError::WatermarkWithBody);
        }
        Ok((
            Event {
                source,
                ts,
                key,
                payload,
                kind,
            },
            r.pos,
        ))
    }

    /// Decodes exactly one event; trailing bytes are an error.
    pub fn decode_exact(bytes: &[u8]) -> Result<Event, DecodeError> {
        let (event, used) = Event::decode(bytes)?;
        if used != bytes.len() {
            return Err(DecodeError::Truncated {
                needed: used,
                available: bytes.len(),
            });
        }
        Ok(event)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DecodeError::Truncated {
                needed: self.pos.saturating_add(n),
                available: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Per-source high-water marks of what a state has already incorporated.
/// A source without an entry has incorporated nothing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimestampVector {
    entries: BTreeMap<SourceId, Timestamp>,
}

impl TimestampVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, source: SourceId) -> Timestamp {
        self.entries
            .get(&source)
            .copied()
            .unwrap_or(Timestamp::ZERO)
    }

    /// Raises the entry for `source` to `ts` if `ts` is larger.
    pub fn advance(&mut self, source: SourceId, ts: Timestamp) {
        let entry = self.entries.entry(source).or_insert(Timestamp::ZERO);
        if ts > *entry {
            *entry = ts;
        }
    }

    /// Non-mutating form of [`advance`](Self::advance).
    pub fn advanced(&self, source: SourceId, ts: Timestamp) -> Self {
        let mut next = self.clone();
        next.advance(source, ts);
        next
    }

    /// True when the data event is already reflected in this vector.
    pub fn is_duplicate(&self, event: &Event) -> bool {
        debug_assert!(event.is_data(), "dedup applies to data events only");
        event.ts <= self.get(event.source)
    }

    /// Pointwise maximum over the union of sources.
    pub fn merge(&self, other: &TimestampVector) -> TimestampVector {
        let mut out = self.clone();
        for (&source, &ts) in &other.entries {
            out.advance(source, ts);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (SourceId, Timestamp)> + '_ {
        self.entries.iter().map(|(s, t)| (*s, *t))
    }
}

impl FromIterator<(SourceId, Timestamp)> for TimestampVector {
    fn from_iter<I: IntoIterator<Item = (SourceId, Timestamp)>>(iter: I) -> Self {
        let mut tv = TimestampVector::new();
        for (s, t) in iter {
            tv.advance(s, t);
        }
        tv
    }
}

/// Writes the length-prefixed (u32 big-endian) event log used for sink
/// output and oracle comparison.
pub fn encode_log<'a>(events: impl IntoIterator<Item = &'a Event>) -> Vec<u8> {
    let mut out = Vec::new();
    for event in events {
        out.extend_from_slice(&(event.encoded_len() as u32).to_be_bytes());
        event.encode_into(&mut out);
    }
    out
}

pub fn decode_log(mut bytes: &[u8]) -> Result<Vec<Event>, DecodeError> {
    let mut events = Vec::new();
    while !bytes.is_empty() {
        if bytes.len() < 4 {
            return Err(DecodeError::Truncated {
                needed: 4,
                available: bytes.len(),
            });
        }
        let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
        let body = bytes.get(4..4 + len).ok_or(DecodeError::Truncated {
            needed: 4 + len,
            available: bytes.len(),
        })?;
        events.push(Event::decode_exact(body)?);
        bytes = &bytes[4 + len..];
    }
    Ok(events)
}
