//! Two endpoints joined by a pair of simulated channels, driven in virtual time.
//!
//! Endpoint `a` sends application payloads scripted with [`Testbed::schedule_send`];
//! endpoint `b` receives them. Both directions carry protocol traffic
//! (data one way, feedback the other), so loss in either channel matters.

use std::collections::VecDeque;

use crate::chansim::{Channel, ChannelConfig, ChannelConfigError};
use crate::clock::Instant;

use super::connection::{Connection, Delivery, ExpiryMode, TransportError};
use super::redundancy::TransportConfig;
use super::segment::Deadline;

/// Consecutive steps allowed at a single instant before the loop is declared stuck.
const STUCK_LIMIT: u32 = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum TestbedError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Channel(#[from] ChannelConfigError),
    #[error("event loop made no progress at {0:?}")]
    Stuck(Instant),
}

/// A datagram released by endpoint `a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Release {
    pub at: Instant,
    pub bytes: usize,
}

pub struct Testbed {
    pub a: Connection,
    pub b: Connection,
    ab: Channel,
    ba: Channel,
    mode: ExpiryMode,
    now: Instant,
    script: VecDeque<(Instant, Vec<u8>, Deadline)>,
    /// Payloads surfaced at `b`, with the instant `recv` returned them.
    pub delivered: Vec<(Instant, Delivery)>,
    pub releases: Vec<Release>,
}

impl Testbed {
    pub fn new(
        transport: TransportConfig,
        forward: ChannelConfig,
        reverse: ChannelConfig,
        mode: ExpiryMode,
    ) -> Result<Self, TestbedError> {
        Ok(Testbed {
            a: Connection::new(transport.clone())?,
            b: Connection::new(transport)?,
            ab: Channel::new(forward)?,
            ba: Channel::new(reverse)?,
            mode,
            now: Instant::ZERO,
            script: VecDeque::new(),
            delivered: Vec::new(),
            releases: Vec::new(),
        })
    }

    pub fn now(&self) -> Instant {
        self.now
    }

    /// Queues an application send at `a`. Sends must be scheduled in time order.
    pub fn schedule_send(&mut self, at: Instant, payload: Vec<u8>, deadline: Deadline) {
        debug_assert!(self.script.back().is_none_or(|(t, _, _)| *t <= at));
        self.script.push_back((at, payload, deadline));
    }

    fn next_event(&self) -> Option<Instant> {
        [
            self.script.front().map(|(t, _, _)| *t),
            self.a.poll_timeout(),
            self.b.poll_timeout(),
            self.ab.next_delivery(),
            self.ba.next_delivery(),
        ]
        .into_iter()
        .flatten()
        .min()
    }

    fn step(&mut self, now: Instant) -> Result<(), TestbedError> {
        while self.script.front().is_some_and(|(t, _, _)| *t <= now) {
            let (_, payload, deadline) = self.script.pop_front().expect("peeked");
            self.a.send(now, &payload, deadline)?;
        }
        for d in self.ab.poll(now) {
            // undecodable input is counted by the endpoint
            let _ = self.b.handle_datagram(now, &d.payload);
        }
        for d in self.ba.poll(now) {
            let _ = self.a.handle_datagram(now, &d.payload);
        }
        self.a.handle_timeout(now);
        self.b.handle_timeout(now);
        while let Some(bytes) = self.a.poll_transmit(now) {
            self.releases.push(Release {
                at: now,
                bytes: bytes.len(),
            });
            self.ab.push(bytes, now);
        }
        while let Some(bytes) = self.b.poll_transmit(now) {
            self.ba.push(bytes, now);
        }
        loop {
            match self.b.recv(now, self.mode) {
                Ok(d) => self.delivered.push((now, d)),
                Err(TransportError::WouldBlock) => break,
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    /// Runs every event up to and including `limit`.
    pub fn run_until(&mut self, limit: Instant) -> Result<(), TestbedError> {
        let mut same_instant = 0;
        while let Some(t) = self.next_event() {
            if t > limit {
                break;
            }
            let t = t.max(self.now);
            if t == self.now {
                same_instant += 1;
                if same_instant > STUCK_LIMIT {
                    return Err(TestbedError::Stuck(t));
                }
            } else {
                same_instant = 0;
            }
            self.now = t;
            self.step(t)?;
        }
        self.now = self.now.max(limit);
        Ok(())
    }

    /// Runs until nothing is scheduled anywhere, or `limit` is reached.
    /// Returns whether quiescence was reached.
    pub fn run_to_quiescence(&mut self, limit: Instant) -> Result<bool, TestbedError> {
        self.run_until(limit)?;
        Ok(self.next_event().is_none())
    }

    pub fn forward_channel(&self) -> &Channel {
        &self.ab
    }

    pub fn reverse_channel(&self) -> &Channel {
        &self.ba
    }
}
