//! Logical-step network simulator.
//!
//! Links are FIFO: a message never overtakes an earlier one on the same
//! link, whatever delay it drew. Different links interleave freely. Every
//! link owns an RNG derived from `(seed, from, to)`, so adding a link never
//! perturbs the delays drawn on another one.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Delay {
    Fixed { steps: u64 },
    Uniform { lo: u64, hi: u64 },
}

impl Default for Delay {
    fn default() -> Self {
        Delay::Fixed { steps: 1 }
    }
}

impl Delay {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            Delay::Uniform { lo, hi } if lo > hi => Err(format!("uniform delay lo {lo} > hi {hi}")),
            _ => Ok(()),
        }
    }

    pub fn max_steps(&self) -> u64 {
        match *self {
            Delay::Fixed { steps } => steps,
            Delay::Uniform { hi, .. } => hi,
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u64 {
        match *self {
            Delay::Fixed { steps } => steps,
            Delay::Uniform { lo, hi } => rng.gen_range(lo..=hi),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub from: NodeId,
    pub to: NodeId,
    pub delay: Delay,
    pub duplicate_prob: f64,
}

impl LinkConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.delay.validate()?;
        if !(0.0..=1.0).contains(&self.duplicate_prob) {
            return Err(format!(
                "duplicate_prob {} outside [0, 1]",
                self.duplicate_prob
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetError {
    #[error("no link configured from {0} to {1}")]
    UnknownLink(NodeId, NodeId),
    #[error("invalid link {from}->{to}: {reason}")]
    InvalidLink {
        from: NodeId,
        to: NodeId,
        reason: String,
    },
}

#[derive(Debug)]
struct LinkState {
    config: LinkConfig,
    rng: ChaCha8Rng,
    tail: u64,
    sent: u64,
    duplicated: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery<M> {
    pub step: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub message: M,
    /// True for the injected second copy.
    pub duplicate: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub sent: u64,
    pub duplicated: u64,
}

pub struct SimNet<M> {
    seed: u64,
    step: u64,
    seq: u64,
    links: BTreeMap<(NodeId, NodeId), LinkState>,
    pending: BTreeMap<(u64, u64), Delivery<M>>,
}

impl<M> fmt::Debug for SimNet<M> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimNet")
            .field("seed", &self.seed)
            .field("step", &self.step)
            .field("links", &self.links.len())
            .field("pending", &self.pending.len())
            .finish()
    }
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl<M: Clone> SimNet<M> {
    pub fn new(seed: u64) -> Self {
        SimNet {
            seed,
            step: 0,
            seq: 0,
            links: BTreeMap::new(),
            pending: BTreeMap::new(),
        }
    }

    pub fn now(&self) -> u64 {
        self.step
    }

    pub fn configure(&mut self, config: LinkConfig) -> Result<(), NetError> {
        config.validate().map_err(|reason| NetError::InvalidLink {
            from: config.from,
            to: config.to,
            reason,
        })?;
        let key = (config.from, config.to);
        match self.links.get_mut(&key) {
            Some(link) => link.config = config,
            None => {
                let rng_seed = mix(self.seed ^ mix(config.from.0 ^ mix(config.to.0)));
                self.links.insert(
                    key,
                    LinkState {
                        config,
                        rng: ChaCha8Rng::seed_from_u64(rng_seed),
                        tail: 0,
                        sent: 0,
                        duplicated: 0,
                    },
                );
            }
        }
        Ok(())
    }

    pub fn has_link(&self, from: NodeId, to: NodeId) -> bool {
        self.links.contains_key(&(from, to))
    }

    pub fn link_stats(&self, from: NodeId, to: NodeId) -> Option<LinkStats> {
        self.links.get(&(from, to)).map(|l| LinkStats {
            sent: l.sent,
            duplicated: l.duplicated,
        })
    }

    pub fn send(&mut self, from: NodeId, to: NodeId, message: M) -> Result<(), NetError> {
        let now = self.step;
        let link = self
            .links
            .get_mut(&(from, to))
            .ok_or(NetError::UnknownLink(from, to))?;
        let at = (now + link.config.delay.sample(&mut link.rng)).max(link.tail);
        link.tail = at;
        link.sent += 1;
        let duplicate =
            link.config.duplicate_prob > 0.0 && link.rng.gen_bool(link.config.duplicate_prob);
        if duplicate {
            link.duplicated += 1;
        }
        self.seq += 1;
        let copy = duplicate.then(|| message.clone());
        self.pending.insert(
            (at, self.seq),
            Delivery {
                step: at,
                from,
                to,
                message,
                duplicate: false,
            },
        );
        if let Some(message) = copy {
            self.seq += 1;
            self.pending.insert(
                (at, self.seq),
                Delivery {
                    step: at,
                    from,
                    to,
                    message,
                    duplicate: true,
                },
            );
        }
        Ok(())
    }

    /// Removes and returns every message due at or before the current step,
    /// in (due step, send order).
    pub fn deliver_due(&mut self) -> Vec<Delivery<M>> {
        let later = self.pending.split_off(&(self.step + 1, 0));
        let due = std::mem::replace(&mut self.pending, later);
        due.into_values()
            .map(|mut d| {
                d.step = self.step;
                d
            })
            .collect()
    }

    /// Advances one logical step and delivers what is due.
    pub fn step(&mut self) -> Vec<Delivery<M>> {
        self.step += 1;
        self.deliver_due()
    }

    pub fn advance(&mut self) {
        self.step += 1;
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    pub fn is_idle(&self) -> bool {
        self.pending.is_empty()
    }
}
