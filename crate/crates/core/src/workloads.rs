//! Smart-grid workload: a plug load generator and the operator logics that
//! consume it.
//!
//! Loads are fixed-point hundredths of a watt. All averaging is integer
//! arithmetic with round-half-up, so replicas on any platform agree
//! bit-for-bit.
//!
//! | logic id         | what it does                                         |
//! |------------------|------------------------------------------------------|
//! | `forecast`       | tumbling window average blended with same-slot median |
//! | `anomaly`        | alarm after `d` readings above `k` x moving average  |
//! | `running_sum`    | per-plug load total (commutative, emits nothing)     |
//! | `counter`        | counts events                                        |
//! | `window_average` | tumbling average over all readings of a partition    |
//! | `salted_echo`    | echoes input tagged with a per-instance salt; breaks replica determinism on purpose |

use std::f64::consts::TAU;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::event::{Event, SourceId, Timestamp};
use crate::runtime::{
    LogicError, LogicRegistry, OperatorLogic, Output, Params, RuntimeError, StateStore,
};

pub const READING_LEN: usize = 20;

/// One smart-plug measurement. Also the payload layout of forecasts and
/// alarms (`load` then carries the forecast or offending load).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlugReading {
    pub plug_id: u64,
    /// Hundredths of a watt.
    pub load: u64,
    pub slot: u32,
}

impl PlugReading {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(READING_LEN);
        out.extend_from_slice(&self.plug_id.to_be_bytes());
        out.extend_from_slice(&self.load.to_be_bytes());
        out.extend_from_slice(&self.slot.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LogicError> {
        if bytes.len() != READING_LEN {
            return Err(LogicError::new(format!(
                "plug reading must be {READING_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        Ok(PlugReading {
            plug_id: u64::from_be_bytes(bytes[0..8].try_into().unwrap()),
            load: u64::from_be_bytes(bytes[8..16].try_into().unwrap()),
            slot: u32::from_be_bytes(bytes[16..20].try_into().unwrap()),
        })
    }
}

/// Each plug is its own event source.
pub fn plug_source(plug_id: u64) -> SourceId {
    SourceId(plug_id)
}

pub fn plug_key(prefix: &[u8], plug_id: u64) -> Vec<u8> {
    let mut key = prefix.to_vec();
    key.extend_from_slice(&plug_id.to_be_bytes());
    key
}

/// Integer mean, rounding halves up.
pub fn mean_round_half_up(values: &[u64]) -> u64 {
    assert!(!values.is_empty());
    let n = values.len() as u128;
    let sum: u128 = values.iter().map(|&v| v as u128).sum();
    ((2 * sum + n) / (2 * n)) as u64
}

/// Median; for an even count the mean of the two middle values, rounding
/// halves up.
pub fn median_round_half_up(values: &[u64]) -> u64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        mean_round_half_up(&sorted[mid - 1..=mid])
    }
}

/// `(avg_now + median(history)) / 2`, history defaulting to `avg_now`.
pub fn forecast_value(avg_now: u64, history: &[u64]) -> u64 {
    let hist = if history.is_empty() {
        avg_now
    } else {
        median_round_half_up(history)
    };
    mean_round_half_up(&[avg_now, hist])
}

/// Parses a non-negative decimal with at most two fractional digits into
/// hundredths.
pub fn parse_hundredths(text: &str) -> Option<u64> {
    let (int, frac) = match text.split_once('.') {
        Some((i, f)) => (i, f),
        None => (text, ""),
    };
    if int.is_empty() || frac.len() > 2 || !int.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    if !frac.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let whole: u64 = int.parse().ok()?;
    let mut cents: u64 = if frac.is_empty() {
        0
    } else {
        frac.parse().ok()?
    };
    if frac.len() == 1 {
        cents *= 10;
    }
    whole.checked_mul(100)?.checked_add(cents)
}

fn param_u64(params: &Params, logic: &str, name: &str, default: u64) -> Result<u64, RuntimeError> {
    match params.get(name) {
        None => Ok(default),
        Some(v) => v.parse().map_err(|_| RuntimeError::BadParams {
            logic: logic.into(),
            reason: format!("{name}={v} is not an unsigned integer"),
        }),
    }
}

fn positive(logic: &str, name: &str, v: u64) -> Result<u64, RuntimeError> {
    if v == 0 {
        Err(RuntimeError::BadParams {
            logic: logic.into(),
            reason: format!("{name} must be positive"),
        })
    } else {
        Ok(v)
    }
}

fn encode_u64s(values: &[u64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_be_bytes()).collect()
}

fn decode_u64s(bytes: &[u8]) -> Result<Vec<u64>, LogicError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(LogicError::new("corrupt u64 list in state"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| u64::from_be_bytes(c.try_into().unwrap()))
        .collect())
}

fn load_u64s(store: &mut dyn StateStore, key: &[u8]) -> Result<Vec<u64>, LogicError> {
    match store.get(key).map_err(|e| LogicError::new(e.to_string()))? {
        Some(bytes) => decode_u64s(&bytes),
        None => Ok(Vec::new()),
    }
}

fn save_u64s(store: &mut dyn StateStore, key: &[u8], values: &[u64]) -> Result<(), LogicError> {
    store
        .put(key, encode_u64s(values))
        .map_err(|e| LogicError::new(e.to_string()))
}

fn state_key(tag: u8, plug: u64, slot: Option<u32>) -> Vec<u8> {
    let mut key = vec![tag];
    key.extend_from_slice(&plug.to_be_bytes());
    if let Some(slot) = slot {
        key.extend_from_slice(&slot.to_be_bytes());
    }
    key
}

/// Energy forecast per plug.
///
/// Readings are grouped into tumbling windows of `window` readings. When a
/// window completes, the forecast is the mean of the window blended with
/// the median of earlier window means recorded for the same slot of day.
/// State: one page per plug for the open window and one page per
/// `(plug, slot)` for the history.
#[derive(Debug, Clone)]
pub struct Forecast {
    pub window: usize,
    pub slots: u32,
}

impl Forecast {
    pub const ID: &'static str = "forecast";

    pub fn from_params(params: &Params) -> Result<Self, RuntimeError> {
        let window = positive(
            Self::ID,
            "window",
            param_u64(params, Self::ID, "window", 4)?,
        )?;
        let slots = positive(Self::ID, "slots", param_u64(params, Self::ID, "slots", 96)?)?;
        Ok(Forecast {
            window: window as usize,
            slots: slots as u32,
        })
    }

    /// One reading; returns the forecast in hundredths when a window closes.
    pub fn step(
        &self,
        store: &mut dyn StateStore,
        reading: &PlugReading,
    ) -> Result<Option<u64>, LogicError> {
        let window_key = state_key(b'w', reading.plug_id, None);
        let mut window = load_u64s(store, &window_key)?;
        window.push(reading.load);
        if window.len() < self.window {
            save_u64s(store, &window_key, &window)?;
            return Ok(None);
        }
        let avg_now = mean_round_half_up(&window);
        let slot = reading.slot % self.slots;
        let history_key = state_key(b'h', reading.plug_id, Some(slot));
        let mut history = load_u64s(store, &history_key)?;
        let forecast = forecast_value(avg_now, &history);
        history.push(avg_now);
        save_u64s(store, &history_key, &history)?;
        store
            .remove(&window_key)
            .map_err(|e| LogicError::new(e.to_string()))?;
        Ok(Some(forecast))
    }
}

impl OperatorLogic for Forecast {
    fn logic_id(&self) -> &str {
        Self::ID
    }

    fn process(
        &self,
        store: &mut dyn StateStore,
        event: &Event,
        out: &mut Vec<Output>,
    ) -> Result<(), LogicError> {
        let reading = PlugReading::decode(&event.payload)?;
        if let Some(value) = self.step(store, &reading)? {
            out.push(Output {
                key: event.key.clone(),
                payload: PlugReading {
                    load: value,
                    ..reading
                }
                .encode(),
            });
        }
        Ok(())
    }
}

/// Flags a plug whose load stays above `k` times its moving average for `d`
/// consecutive readings.
#[derive(Debug, Clone)]
pub struct Anomaly {
    /// Factor in hundredths (3.00 => 300).
    pub k_hundredths: u64,
    pub duration: u64,
    pub average_over: usize,
}

impl Anomaly {
    pub const ID: &'static str = "anomaly";

    pub fn from_params(params: &Params) -> Result<Self, RuntimeError> {
        let k = params.get("k").map(String::as_str).unwrap_or("3");
        let k_hundredths = parse_hundredths(k).ok_or_else(|| RuntimeError::BadParams {
            logic: Self::ID.into(),
            reason: format!("k={k} is not a decimal with at most two places"),
        })?;
        let duration = positive(Self::ID, "d", param_u64(params, Self::ID, "d", 5)?)?;
        let m = positive(Self::ID, "M", param_u64(params, Self::ID, "M", 20)?)?;
        Ok(Anomaly {
            k_hundredths,
            duration,
            average_over: m as usize,
        })
    }

    /// State page layout: `[counter, loads...]` with at most `M` loads.
    pub fn step(
        &self,
        store: &mut dyn StateStore,
        reading: &PlugReading,
    ) -> Result<bool, LogicError> {
        let key = state_key(b'a', reading.plug_id, None);
        let mut page = load_u64s(store, &key)?;
        if page.is_empty() {
            page.push(0);
        }
        let mut counter = page[0];
        let mut recent = page.split_off(1);
        let mut alarm = false;
        if recent.len() == self.average_over {
            let sum: u128 = recent.iter().map(|&v| v as u128).sum();
            // load > (k/100) * (sum / M)
            let excess = reading.load as u128 * self.average_over as u128 * 100
                > self.k_hundredths as u128 * sum;
            if excess {
                counter += 1;
                if counter >= self.duration {
                    alarm = true;
                    counter = 0;
                }
            } else {
                counter = 0;
            }
            recent.remove(0);
        }
        recent.push(reading.load);
        let mut page = Vec::with_capacity(recent.len() + 1);
        page.push(counter);
        page.extend(recent);
        save_u64s(store, &key, &page)?;
        Ok(alarm)
    }
}

impl OperatorLogic for Anomaly {
    fn logic_id(&self) -> &str {
        Self::ID
    }

    fn process(
        &self,
        store: &mut dyn StateStore,
        event: &Event,
        out: &mut Vec<Output>,
    ) -> Result<(), LogicError> {
        let reading = PlugReading::decode(&event.payload)?;
        if self.step(store, &reading)? {
            out.push(Output {
                key: event.key.clone(),
                payload: reading.encode(),
            });
        }
        Ok(())
    }
}

/// Per-plug load total and reading count. Order-insensitive.
#[derive(Debug, Clone, Default)]
pub struct RunningSum;

impl RunningSum {
    pub const ID: &'static str = "running_sum";
}

impl OperatorLogic for RunningSum {
    fn logic_id(&self) -> &str {
        Self::ID
    }

    fn process(
        &self,
        store: &mut dyn StateStore,
        event: &Event,
        _out: &mut Vec<Output>,
    ) -> Result<(), LogicError> {
        let reading = PlugReading::decode(&event.payload)?;
        let key = state_key(b's', reading.plug_id, None);
        let mut acc = load_u64s(store, &key)?;
        acc.resize(2, 0);
        acc[0] += reading.load;
        acc[1] += 1;
        save_u64s(store, &key, &acc)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Counter;

impl Counter {
    pub const ID: &'static str = "counter";
}

impl OperatorLogic for Counter {
    fn logic_id(&self) -> &str {
        Self::ID
    }

    fn process(
        &self,
        store: &mut dyn StateStore,
        _event: &Event,
        _out: &mut Vec<Output>,
    ) -> Result<(), LogicError> {
        let mut n = load_u64s(store, b"count")?;
        n.resize(1, 0);
        n[0] += 1;
        save_u64s(store, b"count", &n)
    }
}

/// Tumbling average over every reading of the partition.
#[derive(Debug, Clone)]
pub struct WindowAverage {
    pub window: usize,
}

impl WindowAverage {
    pub const ID: &'static str = "window_average";
}

impl OperatorLogic for WindowAverage {
    fn logic_id(&self) -> &str {
        Self::ID
    }

    fn process(
        &self,
        store: &mut dyn StateStore,
        event: &Event,
        out: &mut Vec<Output>,
    ) -> Result<(), LogicError> {
        let reading = PlugReading::decode(&event.payload)?;
        let mut window = load_u64s(store, b"window")?;
        window.push(reading.load);
        if window.len() == self.window {
            out.push(Output {
                key: event.key.clone(),
                payload: mean_round_half_up(&window).to_be_bytes().to_vec(),
            });
            window.clear();
        }
        save_u64s(store, b"window", &window)
    }
}

static SALT: AtomicU64 = AtomicU64::new(1);

/// Echoes each input with a salt unique to this instance. Two replicas
/// therefore disagree on every output: a negative control for the sync
/// check.
#[derive(Debug, Clone)]
pub struct SaltedEcho {
    salt: u64,
}

impl SaltedEcho {
    pub const ID: &'static str = "salted_echo";

    pub fn new() -> Self {
        SaltedEcho {
            salt: SALT.fetch_add(1, Ordering::Relaxed),
        }
    }
}

impl Default for SaltedEcho {
    fn default() -> Self {
        Self::new()
    }
}

impl OperatorLogic for SaltedEcho {
    fn logic_id(&self) -> &str {
        Self::ID
    }

    fn process(
        &self,
        _store: &mut dyn StateStore,
        event: &Event,
        out: &mut Vec<Output>,
    ) -> Result<(), LogicError> {
        let mut payload = event.payload.clone();
        payload.extend_from_slice(&self.salt.to_be_bytes());
        out.push(Output {
            key: event.key.clone(),
            payload,
        });
        Ok(())
    }
}

/// Registry with every logic in this module.
pub fn standard_registry() -> LogicRegistry {
    let mut registry = LogicRegistry::new();
    registry
        .register(Forecast::ID, |p| Ok(Box::new(Forecast::from_params(p)?)))
        .register(Anomaly::ID, |p| Ok(Box::new(Anomaly::from_params(p)?)))
        .register(RunningSum::ID, |_| Ok(Box::new(RunningSum)))
        .register(Counter::ID, |_| Ok(Box::new(Counter)))
        .register(WindowAverage::ID, |p| {
            let window = positive(
                WindowAverage::ID,
                "window",
                param_u64(p, WindowAverage::ID, "window", 4)?,
            )?;
            Ok(Box::new(WindowAverage {
                window: window as usize,
            }))
        })
        .register(SaltedEcho::ID, |_| Ok(Box::new(SaltedEcho::new())));
    registry
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyBurst {
    pub plug: u64,
    /// First affected reading index of that plug.
    pub from: u64,
    /// One past the last affected reading index.
    pub to: u64,
    pub factor: f64,
}

/// Load generator for a group of plugs behind one gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlugGenerator {
    pub seed: u64,
    pub first_plug: u64,
    pub plugs: u64,
    pub readings_per_plug: u64,
    /// Steps between two readings of the same plug.
    pub period: u64,
    pub start_step: u64,
    /// Mean load in watts.
    pub base_watts: f64,
    /// Relative amplitude of the daily sine.
    pub diurnal: f64,
    /// Relative noise amplitude (uniform in +-noise).
    pub noise: f64,
    pub slots: u32,
    /// A watermark follows every this many readings of a plug.
    pub watermark_every: u64,
    pub anomalies: Vec<AnomalyBurst>,
    /// Prepended to every event key (used to plant confidentiality
    /// sentinels).
    #[serde(skip)]
    pub key_prefix: Vec<u8>,
}

impl Default for PlugGenerator {
    fn default() -> Self {
        PlugGenerator {
            seed: 0,
            first_plug: 0,
            plugs: 1,
            readings_per_plug: 100,
            period: 1,
            start_step: 1,
            base_watts: 100.0,
            diurnal: 0.3,
            noise: 0.1,
            slots: 96,
            watermark_every: 10,
            anomalies: Vec::new(),
            key_prefix: Vec::new(),
        }
    }
}

/// A generated event and the step at which its gateway emits it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Emitted {
    pub step: u64,
    pub event: Event,
}

impl PlugGenerator {
    pub fn plug_ids(&self) -> impl Iterator<Item = u64> {
        self.first_plug..self.first_plug + self.plugs
    }

    pub fn sources(&self) -> Vec<SourceId> {
        self.plug_ids().map(plug_source).collect()
    }

    pub fn last_step(&self) -> u64 {
        self.start_step + self.readings_per_plug.saturating_sub(1) * self.period + self.period
    }

    fn load_hundredths(&self, plug: u64, reading: u64, slot: u32, rng: &mut ChaCha8Rng) -> u64 {
        let base = self.base_watts * (1.0 + 0.1 * (plug % 5) as f64);
        let phase = TAU * slot as f64 / self.slots as f64 + 0.7 * plug as f64;
        let mut watts = base * (1.0 + self.diurnal * phase.sin());
        watts *= 1.0 + self.noise * rng.gen_range(-1.0..=1.0);
        for burst in &self.anomalies {
            if burst.plug == plug && (burst.from..burst.to).contains(&reading) {
                watts *= burst.factor;
            }
        }
        (watts.max(0.0) * 100.0).round() as u64
    }

    /// All events in emission order. Reading `r` of plug `p` is emitted at
    /// `start + r * period + (p - first) % period` and carries that step as
    /// its timestamp; the stream of each plug ends with a `MAX` watermark.
    pub fn generate(&self) -> Vec<Emitted> {
        let mut out = Vec::new();
        for (index, plug) in self.plug_ids().enumerate() {
            let mut rng =
                ChaCha8Rng::seed_from_u64(self.seed ^ plug.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let source = plug_source(plug);
            let key = plug_key(&self.key_prefix, plug);
            let offset = index as u64 % self.period.max(1);
            let mut last_step = self.start_step;
            for r in 0..self.readings_per_plug {
                let step = self.start_step + r * self.period + offset;
                let slot = (r % self.slots as u64) as u32;
                let reading = PlugReading {
                    plug_id: plug,
                    load: self.load_hundredths(plug, r, slot, &mut rng),
                    slot,
                };
                out.push(Emitted {
                    step,
                    event: Event::data(source, Timestamp(step), key.clone(), reading.encode()),
                });
                if self.watermark_every > 0 && (r + 1) % self.watermark_every == 0 {
                    out.push(Emitted {
                        step,
                        event: Event::watermark(source, Timestamp(step)),
                    });
                }
                last_step = step;
            }
            out.push(Emitted {
                step: last_step,
                event: Event::watermark(source, Timestamp::MAX),
            });
        }
        // stable: keeps each plug's own order
        out.sort_by_key(|e| e.step);
        out
    }
}
