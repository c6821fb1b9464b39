//! Time sources shared by every component.
//!
//! Desk-mode runs use [`VirtualClock`], a discrete-event queue whose notion of
//! "now" only moves when the next scheduled event fires. Live mode uses
//! [`SystemClock`], a monotonic microsecond counter anchored at process start.
//! Both hand out [`Instant`] values with microsecond resolution.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Microseconds since the start of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Instant(u64);

impl Instant {
    pub const ZERO: Instant = Instant(0);

    pub const fn from_micros(us: u64) -> Self {
        Instant(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        Instant(ms * 1000)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    /// Elapsed time since `earlier`, zero if `earlier` is in the future.
    pub fn saturating_since(self, earlier: Instant) -> Duration {
        Duration::from_micros(self.0.saturating_sub(earlier.0))
    }

    pub fn checked_since(self, earlier: Instant) -> Option<Duration> {
        self.0.checked_sub(earlier.0).map(Duration::from_micros)
    }
}

impl fmt::Display for Instant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Sub-microsecond parts of the duration are truncated.
impl Add<Duration> for Instant {
    type Output = Instant;

    fn add(self, rhs: Duration) -> Instant {
        Instant(self.0 + rhs.as_micros() as u64)
    }
}

impl Sub<Instant> for Instant {
    type Output = Duration;

    /// Panics if `rhs` is later than `self`.
    fn sub(self, rhs: Instant) -> Duration {
        Duration::from_micros(
            self.0
                .checked_sub(rhs.0)
                .expect("instant subtraction would go negative"),
        )
    }
}

/// Read-only time source.
pub trait Clock {
    fn now(&self) -> Instant;
}

/// Monotonic wall clock for live mode. Shareable across threads.
#[derive(Debug, Clone, Copy)]
pub struct SystemClock {
    origin: std::time::Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock {
            origin: std::time::Instant::now(),
        }
    }

    /// Converts a clock reading back into a host instant, for sleeping until it.
    pub fn to_std(&self, at: Instant) -> std::time::Instant {
        self.origin + Duration::from_micros(at.as_micros())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Instant {
        Instant(self.origin.elapsed().as_micros() as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClockError {
    #[error("cannot schedule at {at}, clock is already at {now}")]
    PastInstant { at: Instant, now: Instant },
    #[error("event queue is empty")]
    EmptyQueue,
}

/// Handle returned by [`VirtualClock::schedule`]. Tickets increase in schedule order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Ticket(u64);

struct Entry<E> {
    at: Instant,
    ticket: Ticket,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.ticket == other.ticket
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.ticket).cmp(&(other.at, other.ticket))
    }
}

/// Deterministic virtual clock with an event queue.
///
/// Events scheduled for the same instant fire in the order they were
/// scheduled. Time never moves backwards.
pub struct VirtualClock<E> {
    now: Instant,
    next_ticket: u64,
    queue: BinaryHeap<Reverse<Entry<E>>>,
}

impl<E> VirtualClock<E> {
    pub fn new() -> Self {
        VirtualClock {
            now: Instant::ZERO,
            next_ticket: 0,
            queue: BinaryHeap::new(),
        }
    }

    pub fn now(&self) -> Instant {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Instant of the earliest pending event.
    pub fn peek_time(&self) -> Option<Instant> {
        self.queue.peek().map(|Reverse(e)| e.at)
    }

    pub fn schedule(&mut self, at: Instant, event: E) -> Result<Ticket, ClockError> {
        if at < self.now {
            return Err(ClockError::PastInstant { at, now: self.now });
        }
        let ticket = Ticket(self.next_ticket);
        self.next_ticket += 1;
        self.queue.push(Reverse(Entry { at, ticket, event }));
        Ok(ticket)
    }

    pub fn schedule_after(&mut self, delay: Duration, event: E) -> Ticket {
        let at = self.now + delay;
        self.schedule(at, event).expect("future instant")
    }

    /// Jumps to the earliest scheduled instant and returns every event due then,
    /// in schedule order.
    pub fn advance(&mut self) -> Result<(Instant, Vec<E>), ClockError> {
        let at = self.peek_time().ok_or(ClockError::EmptyQueue)?;
        self.now = at;
        let mut fired = Vec::new();
        while let Some(Reverse(head)) = self.queue.peek() {
            if head.at != at {
                break;
            }
            let Reverse(entry) = self.queue.pop().expect("peeked");
            fired.push(entry.event);
        }
        Ok((at, fired))
    }

    /// Pops a single event. Useful for loops that may schedule new events at
    /// the current instant while handling one.
    pub fn pop(&mut self) -> Option<(Instant, E)> {
        let Reverse(entry) = self.queue.pop()?;
        self.now = entry.at;
        Some((entry.at, entry.event))
    }
}

impl<E> Default for VirtualClock<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Clock for VirtualClock<E> {
    fn now(&self) -> Instant {
        self.now
    }
}
