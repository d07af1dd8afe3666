//! Deterministic merge of several input streams into one totally ordered
//! sequence.
//!
//! Each expected source gets its own FIFO queue (its data timestamps are
//! strictly increasing, so the queue is already min-ordered). Releasing
//! merges the queue heads through a binary heap keyed by
//! `(ts, source, arrival index)` and stops at the low watermark: the
//! smallest watermark over all expected sources. A source that has never
//! sent a watermark holds the low watermark back entirely.
//!
//! Operators flagged commutative may use [`MergeBuffer::drain_relaxed`],
//! which skips the watermark wait and hands events out in arrival order.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use thiserror::Error;

use crate::event::{Event, EventKind, SourceId, Timestamp};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OrderingError {
    #[error("source {stream} sent data at ts {ts} but its last data/watermark was {last}")]
    MonotonicityViolation {
        stream: SourceId,
        ts: Timestamp,
        last: Timestamp,
    },
    #[error("event from unexpected source {0}")]
    UnknownSource(SourceId),
}

/// Total-order key: timestamp, then source id, then per-source arrival.
pub type OrderKey = (Timestamp, SourceId, u64);

#[derive(Debug, Clone)]
struct Buffered {
    event: Event,
    arrival: u64,
    global_arrival: u64,
    ingested_at: u64,
}

/// How long released events sat in the buffer, in logical steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Residency {
    pub released: u64,
    pub total_steps: u64,
    pub max_steps: u64,
}

impl Residency {
    fn record(&mut self, steps: u64) {
        self.released += 1;
        self.total_steps += steps;
        self.max_steps = self.max_steps.max(steps);
    }

    pub fn mean_steps(&self) -> f64 {
        if self.released == 0 {
            0.0
        } else {
            self.total_steps as f64 / self.released as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct MergeBuffer {
    expected: BTreeSet<SourceId>,
    queues: BTreeMap<SourceId, VecDeque<Buffered>>,
    watermarks: BTreeMap<SourceId, Timestamp>,
    last_data: BTreeMap<SourceId, Timestamp>,
    arrivals: BTreeMap<SourceId, u64>,
    global_arrival: u64,
    released: Option<OrderKey>,
    pending: usize,
    clock: u64,
    residency: Residency,
}

impl MergeBuffer {
    pub fn new(expected: impl IntoIterator<Item = SourceId>) -> Self {
        MergeBuffer {
            expected: expected.into_iter().collect(),
            queues: BTreeMap::new(),
            watermarks: BTreeMap::new(),
            last_data: BTreeMap::new(),
            arrivals: BTreeMap::new(),
            global_arrival: 0,
            released: None,
            pending: 0,
            clock: 0,
            residency: Residency::default(),
        }
    }

    pub fn expected_sources(&self) -> &BTreeSet<SourceId> {
        &self.expected
    }

    /// Sets the logical step used to stamp newly ingested events for
    /// residency accounting.
    pub fn set_clock(&mut self, step: u64) {
        self.clock = step;
    }

    pub fn ingest(&mut self, event: Event) -> Result<(), OrderingError> {
        if !self.expected.contains(&event.source) {
            return Err(OrderingError::UnknownSource(event.source));
        }
        match event.kind {
            EventKind::Watermark => {
                let wm = self
                    .watermarks
                    .entry(event.source)
                    .or_insert(Timestamp::ZERO);
                if event.ts > *wm {
                    *wm = event.ts;
                }
            }
            EventKind::Data => {
                let floor = self
                    .last_data
                    .get(&event.source)
                    .copied()
                    .max(self.watermarks.get(&event.source).copied());
                if let Some(last) = floor {
                    if event.ts <= last {
                        return Err(OrderingError::MonotonicityViolation {
                            stream: event.source,
                            ts: event.ts,
                            last,
                        });
                    }
                }
                self.last_data.insert(event.source, event.ts);
                let arrival = self.arrivals.entry(event.source).or_insert(0);
                let buffered = Buffered {
                    event,
                    arrival: *arrival,
                    global_arrival: self.global_arrival,
                    ingested_at: self.clock,
                };
                *arrival += 1;
                self.global_arrival += 1;
                self.pending += 1;
                self.queues
                    .entry(buffered.event.source)
                    .or_default()
                    .push_back(buffered);
            }
        }
        Ok(())
    }

    /// Minimum watermark over the expected sources, or `None` while any of
    /// them has not sent one yet.
    pub fn low_watermark(&self) -> Option<Timestamp> {
        if self.expected.is_empty() {
            return None;
        }
        let mut low = Timestamp::MAX;
        for source in &self.expected {
            low = low.min(*self.watermarks.get(source)?);
        }
        Some(low)
    }

    pub fn watermark(&self, source: SourceId) -> Option<Timestamp> {
        self.watermarks.get(&source).copied()
    }

    /// Sources currently holding the low watermark back.
    pub fn blocking_sources(&self) -> Vec<SourceId> {
        match self.low_watermark() {
            None => self
                .expected
                .iter()
                .filter(|s| !self.watermarks.contains_key(s))
                .copied()
                .collect(),
            Some(low) => self
                .expected
                .iter()
                .filter(|s| self.watermarks.get(s) == Some(&low))
                .copied()
                .collect(),
        }
    }

    /// Number of buffered data events.
    pub fn pending(&self) -> usize {
        self.pending
    }

    /// Buffered data events already at or below the low watermark, i.e.
    /// what the next [`drain`](Self::drain) would release.
    pub fn releasable(&self) -> usize {
        let Some(low) = self.low_watermark() else {
            return 0;
        };
        self.queues
            .values()
            .map(|q| q.iter().take_while(|b| b.event.ts <= low).count())
            .sum()
    }

    pub fn residency(&self) -> Residency {
        self.residency
    }

    /// Removes and returns, in total order, every buffered data event at or
    /// below the low watermark.
    pub fn drain(&mut self) -> Vec<Event> {
        let Some(low) = self.low_watermark() else {
            return Vec::new();
        };
        let mut heads: BinaryHeap<Reverse<OrderKey>> = BinaryHeap::new();
        for (source, queue) in &self.queues {
            if let Some(head) = queue.front() {
                heads.push(Reverse((head.event.ts, *source, head.arrival)));
            }
        }
        let mut out = Vec::new();
        while let Some(Reverse(key)) = heads.pop() {
            if key.0 > low {
                break;
            }
            let queue = self.queues.get_mut(&key.1).expect("queue for heap entry");
            let item = queue.pop_front().expect("heap entry has a buffered event");
            debug_assert_eq!(item.arrival, key.2);
            debug_assert!(self.released.is_none_or(|prev| prev <= key));
            self.released = Some(key);
            self.residency
                .record(self.clock.saturating_sub(item.ingested_at));
            if let Some(next) = queue.front() {
                heads.push(Reverse((next.event.ts, key.1, next.arrival)));
            }
            out.push(item.event);
        }
        self.pending -= out.len();
        out
    }

    /// Removes and returns every buffered data event in arrival order,
    /// without waiting for watermarks. Only valid for commutative
    /// consumers.
    pub fn drain_relaxed(&mut self) -> Vec<Event> {
        let mut all: Vec<Buffered> = self.queues.values_mut().flat_map(|q| q.drain(..)).collect();
        all.sort_by_key(|b| b.global_arrival);
        self.pending = 0;
        all.into_iter()
            .map(|b| {
                self.residency
                    .record(self.clock.saturating_sub(b.ingested_at));
                b.event
            })
            .collect()
    }

    /// The order key of the last event released by [`drain`](Self::drain).
    pub fn last_released(&self) -> Option<OrderKey> {
        self.released
    }
}

/// Reported when a buffer holds events but its low watermark has not moved
/// for the configured number of observations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stall {
    pub idle_steps: u64,
    pub pending: usize,
    pub blocking: Vec<SourceId>,
}

#[derive(Debug, Clone)]
pub struct StallDetector {
    limit: u64,
    idle: u64,
    last_low: Option<Timestamp>,
}

impl StallDetector {
    pub fn new(limit: u64) -> Self {
        StallDetector {
            limit,
            idle: 0,
            last_low: None,
        }
    }

    /// Call once per logical step. Reports a stall once the low watermark
    /// has stayed put with events pending for more than `limit` steps.
    pub fn observe(&mut self, buffer: &MergeBuffer) -> Option<Stall> {
        let low = buffer.low_watermark();
        if buffer.pending() == 0 || low != self.last_low {
            self.idle = 0;
            self.last_low = low;
            return None;
        }
        self.idle += 1;
        if self.idle > self.limit {
            Some(Stall {
                idle_steps: self.idle,
                pending: buffer.pending(),
                blocking: buffer.blocking_sources(),
            })
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn data(src: u64, ts: u64) -> Event {
        Event::data(SourceId(src), Timestamp(ts), vec![], vec![])
    }

    fn wm(src: u64, ts: u64) -> Event {
        Event::watermark(SourceId(src), Timestamp(ts))
    }

    fn buffer(sources: &[u64]) -> MergeBuffer {
        MergeBuffer::new(sources.iter().map(|&s| SourceId(s)))
    }

    fn keys(events: &[Event]) -> Vec<(u64, u64)> {
        events.iter().map(|e| (e.source.0, e.ts.0)).collect()
    }

    #[test]
    fn repeated_timestamp_is_rejected() {
        let mut b = buffer(&[1]);
        b.ingest(data(1, 4)).unwrap();
        assert!(matches!(
            b.ingest(data(1, 4)),
            Err(OrderingError::MonotonicityViolation { .. })
        ));
    }

    #[test]
    fn data_at_or_below_own_watermark_is_rejected() {
        let mut b = buffer(&[1]);
        b.ingest(wm(1, 10)).unwrap();
        assert!(b.ingest(data(1, 10)).is_err());
        b.ingest(data(1, 11)).unwrap();
    }

    #[test]
    fn watermark_keeps_maximum() {
        let mut b = buffer(&[1]);
        b.ingest(wm(1, 9)).unwrap();
        b.ingest(wm(1, 7)).unwrap();
        assert_eq!(b.watermark(SourceId(1)), Some(Timestamp(9)));
    }

    #[test]
    fn unknown_source_is_rejected() {
        let mut b = buffer(&[1, 2]);
        assert_eq!(
            b.ingest(data(3, 1)),
            Err(OrderingError::UnknownSource(SourceId(3)))
        );
    }

    #[test]
    fn release_waits_for_every_source_watermark() {
        let mut b = buffer(&[1, 2]);
        b.ingest(data(1, 3)).unwrap();
        b.ingest(data(2, 5)).unwrap();
        b.ingest(wm(1, 4)).unwrap();
        b.ingest(wm(2, 6)).unwrap();
        // low watermark 4: only s1@3 may go
        assert_eq!(keys(&b.drain()), vec![(1, 3)]);
        b.ingest(wm(1, 6)).unwrap();
        assert_eq!(keys(&b.drain()), vec![(2, 5)]);
        assert_eq!(b.pending(), 0);
    }

    #[test]
    fn silent_source_blocks_release() {
        let mut b = buffer(&[1, 2]);
        b.ingest(data(1, 1)).unwrap();
        b.ingest(wm(1, 100)).unwrap();
        assert!(b.drain().is_empty());
        assert_eq!(b.blocking_sources(), vec![SourceId(2)]);
    }

    #[test]
    fn equal_timestamps_break_ties_by_source() {
        let mut b = buffer(&[1, 2]);
        b.ingest(data(2, 7)).unwrap();
        b.ingest(data(1, 7)).unwrap();
        b.ingest(wm(2, 7)).unwrap();
        b.ingest(wm(1, 7)).unwrap();
        assert_eq!(keys(&b.drain()), vec![(1, 7), (2, 7)]);
    }

    #[test]
    fn relaxed_drain_passes_through_in_arrival_order() {
        let mut b = buffer(&[1, 2]);
        assert!(b.drain_relaxed().is_empty());
        b.ingest(data(2, 9)).unwrap();
        b.ingest(data(1, 3)).unwrap();
        assert_eq!(keys(&b.drain_relaxed()), vec![(2, 9), (1, 3)]);
        assert!(b.drain_relaxed().is_empty());
    }

    #[test]
    fn stall_detector_names_silent_source() {
        let mut b = buffer(&[1, 2]);
        b.ingest(data(1, 1)).unwrap();
        let mut d = StallDetector::new(3);
        assert!(d.observe(&b).is_none());
        assert!(d.observe(&b).is_none());
        assert!(d.observe(&b).is_none());
        let stall = d.observe(&b).unwrap();
        assert_eq!(stall.blocking, vec![SourceId(1), SourceId(2)]);
        assert_eq!(stall.pending, 1);
    }

    #[test]
    fn residency_counts_steps_in_buffer() {
        let mut b = buffer(&[1]);
        b.set_clock(2);
        b.ingest(data(1, 1)).unwrap();
        b.set_clock(7);
        b.ingest(wm(1, 1)).unwrap();
        b.drain();
        assert_eq!(b.residency().max_steps, 5);
    }

    /// Per-source streams: strictly increasing data ts, watermarks
    /// interleaved, and a final end-of-stream watermark.
    fn streams(seed: u64, sources: u64, per_source: usize) -> Vec<Vec<Event>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (1..=sources)
            .map(|s| {
                let mut ts = 0;
                let mut out = Vec::new();
                for i in 0..per_source {
                    ts += rng.gen_range(1..4);
                    out.push(data(s, ts));
                    if i % 3 == 2 {
                        out.push(wm(s, ts));
                    }
                }
                out.push(wm(s, u64::MAX));
                out
            })
            .collect()
    }

    fn interleave(streams: &[Vec<Event>], seed: u64) -> Vec<Event> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = streams
            .iter()
            .enumerate()
            .flat_map(|(i, s)| std::iter::repeat_n(i, s.len()))
            .collect();
        order.shuffle(&mut rng);
        let mut cursors = vec![0; streams.len()];
        order
            .into_iter()
            .map(|i| {
                let e = streams[i][cursors[i]].clone();
                cursors[i] += 1;
                e
            })
            .collect()
    }

    proptest! {
        #[test]
        fn drain_output_matches_sorted_oracle(
            seed in any::<u64>(),
            order_seed in any::<u64>(),
            sources in 1u64..5,
        ) {
            let streams = streams(seed, sources, 12);
            let mut oracle: Vec<Event> =
                streams.iter().flatten().filter(|e| e.is_data()).cloned().collect();
            oracle.sort_by_key(|e| (e.ts, e.source));

            let mut b = MergeBuffer::new((1..=sources).map(SourceId));
            let mut out = Vec::new();
            for e in interleave(&streams, order_seed) {
                b.ingest(e).unwrap();
                let low = b.low_watermark();
                for released in b.drain() {
                    prop_assert!(Some(released.ts) <= low);
                    out.push(released);
                }
            }
            prop_assert_eq!(out, oracle);
        }
    }
}
