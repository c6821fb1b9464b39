//! Seeded datagram channel with delay, jitter, loss and reordering.
//!
//! Every random draw comes from one ChaCha stream per channel and is consumed
//! strictly in `push` order, so a `(seed, push/poll sequence)` pair fully
//! determines what comes out.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JitterModel {
    /// Uniform in `[-jitter, +jitter]`.
    #[default]
    Uniform,
    /// Normal with standard deviation `jitter`, truncated to `[-delay, +3 jitter]`.
    TruncatedNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub one_way_delay_ms: f64,
    pub jitter_ms: f64,
    pub jitter_model: JitterModel,
    pub loss_prob: f64,
    pub reorder_prob: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    /// Half of a 6.5 ms ping round trip, with an estimated ±0.5 ms spread.
    fn default() -> Self {
        ChannelConfig {
            one_way_delay_ms: 3.25,
            jitter_ms: 0.5,
            jitter_model: JitterModel::Uniform,
            loss_prob: 0.0,
            reorder_prob: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelConfigError {
    #[error("one_way_delay_ms must be finite and >= 0, got {0}")]
    Delay(f64),
    #[error("jitter_ms must be finite and >= 0, got {0}")]
    Jitter(f64),
    #[error("uniform jitter {jitter} exceeds delay {delay}; delivery could precede sending")]
    JitterExceedsDelay { delay: f64, jitter: f64 },
    #[error("loss_prob must be in [0, 1], got {0}")]
    Loss(f64),
    #[error("reorder_prob must be in [0, 1), got {0}")]
    Reorder(f64),
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelConfigError> {
        if !(self.one_way_delay_ms.is_finite() && self.one_way_delay_ms >= 0.0) {
            return Err(ChannelConfigError::Delay(self.one_way_delay_ms));
        }
        if !(self.jitter_ms.is_finite() && self.jitter_ms >= 0.0) {
            return Err(ChannelConfigError::Jitter(self.jitter_ms));
        }
        if self.jitter_model == JitterModel::Uniform && self.jitter_ms > self.one_way_delay_ms {
            return Err(ChannelConfigError::JitterExceedsDelay {
                delay: self.one_way_delay_ms,
                jitter: self.jitter_ms,
            });
        }
        // loss_prob = 1 is accepted as the degenerate "dead link" case.
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(ChannelConfigError::Loss(self.loss_prob));
        }
        if !(0.0..1.0).contains(&self.reorder_prob) {
            return Err(ChannelConfigError::Reorder(self.reorder_prob));
        }
        Ok(())
    }

    /// Earliest possible delivery offset in microseconds.
    pub fn min_delay_us(&self) -> u64 {
        match self.jitter_model {
            JitterModel::Uniform => ms_to_us(self.one_way_delay_ms - self.jitter_ms),
            JitterModel::TruncatedNormal => 0,
        }
    }
}

fn ms_to_us(ms: f64) -> u64 {
    (ms * 1000.0).round().max(0.0) as u64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledDatagram {
    pub payload: Vec<u8>,
    pub enqueued: Instant,
    pub delivery_time: Instant,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub pushed: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub reordered: u64,
}

impl ChannelStats {
    pub fn pending(&self) -> u64 {
        self.pushed - self.delivered - self.dropped
    }
}

pub struct Channel {
    cfg: ChannelConfig,
    rng: ChaCha8Rng,
    normal: Option<Normal<f64>>,
    // keyed by (delivery_time, insertion index) so ties keep push order
    queue: BTreeMap<(Instant, u64), ScheduledDatagram>,
    inserted: u64,
    stats: ChannelStats,
}

impl Channel {
    pub fn new(cfg: ChannelConfig) -> Result<Self, ChannelConfigError> {
        cfg.validate()?;
        let normal = match cfg.jitter_model {
            JitterModel::TruncatedNormal if cfg.jitter_ms > 0.0 => {
                Some(Normal::new(0.0, cfg.jitter_ms * 1000.0).expect("positive std-dev"))
            }
            _ => None,
        };
        Ok(Channel {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            normal,
            queue: BTreeMap::new(),
            inserted: 0,
            stats: ChannelStats::default(),
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    fn jitter_sample_us(&mut self) -> f64 {
        let j = self.cfg.jitter_ms * 1000.0;
        if j == 0.0 {
            return 0.0;
        }
        match self.cfg.jitter_model {
            JitterModel::Uniform => self.rng.random_range(-j..=j),
            JitterModel::TruncatedNormal => {
                let normal = self.normal.expect("built with positive jitter");
                let floor = -self.cfg.one_way_delay_ms * 1000.0;
                loop {
                    let x = normal.sample(&mut self.rng);
                    if x >= floor && x <= 3.0 * j {
                        return x;
                    }
                }
            }
        }
    }

    /// Offers a datagram to the channel. Returns the scheduled delivery time,
    /// or `None` if the datagram was dropped.
    pub fn push(&mut self, payload: Vec<u8>, now: Instant) -> Option<Instant> {
        self.stats.pushed += 1;
        let lost = self.rng.random::<f64>() < self.cfg.loss_prob;
        if lost {
            self.stats.dropped += 1;
            return None;
        }
        let mut offset = self.cfg.one_way_delay_ms * 1000.0 + self.jitter_sample_us();
        if self.cfg.reorder_prob > 0.0 && self.rng.random::<f64>() < self.cfg.reorder_prob {
            self.stats.reordered += 1;
            let j = self.cfg.jitter_ms * 1000.0;
            if j > 0.0 {
                offset += self.rng.random_range(0.0..=j);
            }
        }
        let delivery_time = Instant::from_micros(now.as_micros() + offset.round().max(0.0) as u64);
        let key = (delivery_time, self.inserted);
        self.inserted += 1;
        self.queue.insert(
            key,
            ScheduledDatagram {
                payload,
                enqueued: now,
                delivery_time,
            },
        );
        Some(delivery_time)
    }

    /// Removes and returns everything due at or before `now`, in delivery order.
    pub fn poll(&mut self, now: Instant) -> Vec<ScheduledDatagram> {
        let later = self.queue.split_off(&(Instant::from_micros(now.as_micros() + 1), 0));
        let due = std::mem::replace(&mut self.queue, later);
        self.stats.delivered += due.len() as u64;
        due.into_values().collect()
    }

    pub fn next_delivery(&self) -> Option<Instant> {
        self.queue.keys().next().map(|&(t, _)| t)
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }
}
