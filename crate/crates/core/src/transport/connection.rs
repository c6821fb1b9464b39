//! Sans-IO transport endpoint.
//!
//! A [`Connection`] is one end of a bidirectional, partially reliable,
//! in-order datagram link. It never touches a socket or a clock: callers
//! feed it the current [`Instant`] and shuttle datagrams in and out.
//!
//! Send path: every payload gets the next 16-bit sequence number and joins
//! the open coding group. Groups are homogeneous in deadline; a send with a
//! different deadline closes the open group early. All datagrams leave
//! through a pacer that spaces releases by `bits / bottleneck_rate`.
//!
//! Receive path: segments are buffered until they can be released in
//! sequence order. A missing sequence is given up when
//! * a later-received member of its own group has outlived the group deadline,
//! * its group can no longer be repaired and no retransmission fits the
//!   deadline (after a short reordering grace), or
//! * the peer's sender has advertised that it stopped caring about it.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::feedback::FeedbackReport;
use super::parity::{build_parity, recover_from_parity};
use super::redundancy::{
    pacing_gap, select_redundancy, RedundancyPlan, TransportConfig, TransportConfigError,
};
use super::segment::{
    decode_segment, encode_segment, unwrap_seq, Deadline, SegmentError, SegmentKind,
    TransportSegment, MAX_SEGMENT_PAYLOAD,
};
use crate::clock::Instant;

/// Per-member prefix inside parity blobs: payload length (u16) and send timestamp (u32).
const BLOB_PREFIX: usize = 6;
const BITMAP_BITS: u64 = 32;
/// Sequences whose copy counts the sender remembers for loss estimation.
const COPY_HISTORY: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("endpoint is closed")]
    EndpointClosed,
    #[error("payload of {0} bytes exceeds 1400")]
    PayloadTooLarge(usize),
    #[error("no deliverable data")]
    WouldBlock,
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Config(#[from] TransportConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpiryMode {
    #[default]
    DropExpired,
    DeliverAll,
    MarkExpired,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub payload: Vec<u8>,
    pub seq: u16,
    pub send_ts_us: u32,
    pub expired: bool,
    pub recovered_via_parity: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendReceipt {
    pub seq: u16,
    pub departure_ts: Instant,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportStats {
    pub data_segments_sent: u64,
    pub datagrams_sent: u64,
    pub bits_sent: u64,
    pub extra_copies_sent: u64,
    pub retransmissions: u64,
    pub parity_sent: u64,
    pub feedback_sent: u64,
    pub sender_abandoned: u64,
    pub reports_received: u64,
    pub stale_reports: u64,

    pub datagrams_received: u64,
    pub data_received: u64,
    pub duplicates: u64,
    pub decode_errors: u64,
    pub recovered: u64,
    pub delivered: u64,
    pub expired_dropped: u64,
    pub expired_marked: u64,
    pub lost_residual: u64,
}

impl TransportStats {
    pub fn expired(&self) -> u64 {
        self.expired_dropped + self.expired_marked
    }
}

struct Pacer {
    next_free_ns: u64,
    queue: VecDeque<(Instant, Vec<u8>)>,
}

impl Pacer {
    /// Reserves the bottleneck for `bits` and returns the release instant.
    fn reserve(&mut self, cfg: &TransportConfig, now: Instant, bits: u64) -> Instant {
        let dep_ns = (now.as_micros() * 1000).max(self.next_free_ns);
        self.next_free_ns = dep_ns + pacing_gap(cfg, bits).as_nanos() as u64;
        Instant::from_micros(dep_ns.div_ceil(1000))
    }
}

struct TxGroup {
    id: u64,
    base: u64,
    k: u8,
    n: u8,
    deadline: Deadline,
    plan: RedundancyPlan,
    blobs: Vec<Vec<u8>>,
}

/// A data sequence the sender still answers for.
struct Outstanding {
    bytes: Vec<u8>,
    first_tx: Instant,
    last_tx: Instant,
    deadline: Deadline,
    reactive: bool,
    retransmitted: bool,
}

struct Buffered {
    payload: Vec<u8>,
    send_ts: u32,
    deadline: Deadline,
    recovered: bool,
}

struct RxGroup {
    declared_k: u8,
    parity_slot: bool,
    deadline: Deadline,
    actual_k: Option<u8>,
    parity: Option<Vec<u8>>,
    blobs: BTreeMap<u8, Vec<u8>>,
}

impl RxGroup {
    fn span(&self) -> u64 {
        self.declared_k.max(self.actual_k.unwrap_or(0)) as u64
    }
}

#[derive(Default)]
struct RxState {
    next_expected: u64,
    highest: Option<u64>,
    highest_send_ts: u32,
    highest_arrival: Instant,
    buffer: BTreeMap<u64, Buffered>,
    /// Arrivals per sequence, duplicates included, near the top.
    received: BTreeMap<u64, u32>,
    groups: BTreeMap<u64, RxGroup>,
    hole_since: Option<Instant>,
    peer_floor: u64,
    unreported: u32,
    first_unreported_at: Option<Instant>,
    rate_bytes: u64,
    rate_since: Instant,
    advances: u64,
}

pub struct Connection {
    cfg: TransportConfig,
    closed: bool,

    next_seq: u64,
    next_group: u64,
    open_group: Option<TxGroup>,
    pacer: Pacer,
    outstanding: BTreeMap<u64, Outstanding>,
    /// Datagrams sent per sequence for the last `COPY_HISTORY` sequences;
    /// index 0 is sequence `next_seq - len`.
    copies_sent: VecDeque<u32>,
    last_report_top: Option<u64>,
    floor_dirty: bool,
    loss_ewma: f64,
    srtt_ms: Option<f64>,

    rx: RxState,
    stats: TransportStats,
}

fn blob(payload: &[u8], send_ts: u32) -> Vec<u8> {
    let mut b = Vec::with_capacity(BLOB_PREFIX + payload.len());
    b.extend_from_slice(&(payload.len() as u16).to_be_bytes());
    b.extend_from_slice(&send_ts.to_be_bytes());
    b.extend_from_slice(payload);
    b
}

fn unblob(b: &[u8]) -> Option<(Vec<u8>, u32)> {
    if b.len() < BLOB_PREFIX {
        return None;
    }
    let len = u16::from_be_bytes([b[0], b[1]]) as usize;
    let ts = u32::from_be_bytes([b[2], b[3], b[4], b[5]]);
    b.get(BLOB_PREFIX..BLOB_PREFIX + len).map(|p| (p.to_vec(), ts))
}

fn window_mask(window: u64) -> u32 {
    if window >= 32 {
        u32::MAX
    } else {
        (1u32 << window) - 1
    }
}

fn ts32(t: Instant) -> u32 {
    t.as_micros() as u32
}

/// Age of a 32-bit sender timestamp relative to `now`, wrap-aware.
fn age_us(now: Instant, send_ts: u32) -> u64 {
    ts32(now).wrapping_sub(send_ts) as u64
}

impl Connection {
    pub fn new(cfg: TransportConfig) -> Result<Self, TransportError> {
        cfg.validate()?;
        Ok(Connection {
            cfg,
            closed: false,
            next_seq: 0,
            next_group: 0,
            open_group: None,
            pacer: Pacer {
                next_free_ns: 0,
                queue: VecDeque::new(),
            },
            outstanding: BTreeMap::new(),
            copies_sent: VecDeque::new(),
            last_report_top: None,
            floor_dirty: false,
            loss_ewma: 0.0,
            srtt_ms: None,
            rx: RxState::default(),
            stats: TransportStats::default(),
        })
    }

    pub fn config(&self) -> &TransportConfig {
        &self.cfg
    }

    pub fn stats(&self) -> TransportStats {
        self.stats
    }

    pub fn loss_estimate(&self) -> f64 {
        self.loss_ewma
    }

    pub fn rtt_estimate_ms(&self) -> f64 {
        self.srtt_ms.unwrap_or(self.cfg.initial_rtt_ms)
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Sequence numbers issued so far (64-bit, never wraps).
    pub fn sequences_sent(&self) -> u64 {
        self.next_seq
    }

    /// Next sequence the receive side will release (64-bit).
    pub fn receive_floor(&self) -> u64 {
        self.rx.next_expected
    }

    pub fn buffered(&self) -> usize {
        self.rx.buffer.len()
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }

    pub fn queued_datagrams(&self) -> usize {
        self.pacer.queue.len()
    }

    /// Redundancy that a send with `deadline` would get right now.
    pub fn current_plan(&self, deadline: Deadline) -> RedundancyPlan {
        select_redundancy(self.loss_ewma, &self.cfg, self.rtt_estimate_ms(), deadline)
    }

    fn enqueue(&mut self, now: Instant, bytes: Vec<u8>) -> Instant {
        let departure = self.pacer.reserve(&self.cfg, now, bytes.len() as u64 * 8);
        self.pacer.queue.push_back((departure, bytes));
        departure
    }

    /// Queues `payload` for paced transmission.
    pub fn send(
        &mut self,
        now: Instant,
        payload: &[u8],
        deadline: Deadline,
    ) -> Result<SendReceipt, TransportError> {
        if self.closed {
            return Err(TransportError::EndpointClosed);
        }
        if payload.len() > MAX_SEGMENT_PAYLOAD {
            return Err(TransportError::PayloadTooLarge(payload.len()));
        }
        if self.open_group.as_ref().is_some_and(|g| g.deadline != deadline) {
            self.close_group(now);
        }
        if self.open_group.is_none() {
            let plan = self.current_plan(deadline);
            let k = self.cfg.coding_group_k;
            self.open_group = Some(TxGroup {
                id: self.next_group,
                base: self.next_seq,
                k,
                n: if plan.use_group_parity { k + 1 } else { k },
                deadline,
                plan,
                blobs: Vec::new(),
            });
            self.next_group += 1;
        }
        let group = self.open_group.as_ref().expect("opened above");
        let seq = self.next_seq;
        let plan = group.plan;
        let mut seg = TransportSegment {
            kind: SegmentKind::Data,
            seq: seq as u16,
            group_id: group.id as u16,
            group_index: (seq - group.base) as u8,
            k: group.k,
            n: group.n,
            send_ts_us: 0,
            deadline,
            payload: payload.to_vec(),
        };
        let bits = seg.encoded_len() as u64 * 8;
        let departure = self.pacer.reserve(&self.cfg, now, bits);
        seg.send_ts_us = ts32(departure);
        let bytes = encode_segment(&seg)?;
        self.pacer.queue.push_back((departure, bytes.clone()));
        let mut last = departure;
        for _ in 1..plan.proactive_copies {
            last = self.enqueue(now, bytes.clone());
            self.stats.extra_copies_sent += 1;
        }
        self.outstanding.insert(
            seq,
            Outstanding {
                bytes,
                first_tx: departure,
                last_tx: last,
                deadline,
                reactive: plan.allow_reactive_retx,
                retransmitted: false,
            },
        );
        self.copies_sent.push_back(plan.proactive_copies);
        if self.copies_sent.len() > COPY_HISTORY {
            self.copies_sent.pop_front();
        }
        self.stats.data_segments_sent += 1;
        self.next_seq += 1;
        let group = self.open_group.as_mut().expect("opened above");
        group.blobs.push(blob(payload, seg.send_ts_us));
        if group.blobs.len() == group.k as usize {
            self.close_group(now);
        }
        Ok(SendReceipt {
            seq: seq as u16,
            departure_ts: departure,
        })
    }

    fn close_group(&mut self, now: Instant) {
        let Some(group) = self.open_group.take() else {
            return;
        };
        if !group.plan.use_group_parity || group.blobs.is_empty() {
            return;
        }
        // members too large for a prefixed parity blob go unprotected
        if group.blobs.iter().any(|b| b.len() > MAX_SEGMENT_PAYLOAD) {
            return;
        }
        let parity = build_parity(&group.blobs).expect("non-empty group");
        let m = group.blobs.len() as u8;
        let mut seg = TransportSegment {
            kind: SegmentKind::Parity,
            seq: group.base as u16,
            group_id: group.id as u16,
            group_index: m,
            k: m,
            n: m + 1,
            send_ts_us: 0,
            deadline: group.deadline,
            payload: parity,
        };
        let departure = self.pacer.reserve(&self.cfg, now, seg.encoded_len() as u64 * 8);
        seg.send_ts_us = ts32(departure);
        let bytes = encode_segment(&seg).expect("parity segment within limits");
        self.pacer.queue.push_back((departure, bytes));
        self.stats.parity_sent += 1;
    }

    /// Next datagram whose paced release time has come.
    pub fn poll_transmit(&mut self, now: Instant) -> Option<Vec<u8>> {
        match self.pacer.queue.front() {
            Some((at, _)) if *at <= now => {
                let (_, bytes) = self.pacer.queue.pop_front().expect("peeked");
                self.stats.datagrams_sent += 1;
                self.stats.bits_sent += bytes.len() as u64 * 8;
                Some(bytes)
            }
            _ => None,
        }
    }

    /// Release instant of the next queued datagram.
    pub fn next_departure(&self) -> Option<Instant> {
        self.pacer.queue.front().map(|(t, _)| *t)
    }

    fn copy_slot(&mut self, seq: u64) -> Option<&mut u32> {
        let first = self.next_seq - self.copies_sent.len() as u64;
        let idx = seq.checked_sub(first)?;
        self.copies_sent.get_mut(idx as usize)
    }

    fn copies_of(&self, seq: u64) -> Option<u32> {
        let first = self.next_seq - self.copies_sent.len() as u64;
        self.copies_sent.get(seq.checked_sub(first)? as usize).copied()
    }

    fn rto(&self) -> Duration {
        Duration::from_millis(self.cfg.retransmission_timeout_ms)
    }

    fn sender_floor(&self) -> u64 {
        self.outstanding.keys().next().copied().unwrap_or(self.next_seq)
    }

    /// Drops expired entries and re-queues reactive ones unacknowledged for
    /// longer than the retransmission timeout.
    fn service_outstanding(&mut self, now: Instant) {
        let rto = self.rto();
        let mut expired = Vec::new();
        let mut due = Vec::new();
        for (&seq, o) in &self.outstanding {
            let age = now.saturating_since(o.first_tx);
            if o.deadline.micros().is_some_and(|d| age.as_micros() as u64 > d) {
                expired.push(seq);
            } else if o.reactive && now.saturating_since(o.last_tx) > rto {
                due.push(seq);
            }
        }
        for seq in expired {
            self.outstanding.remove(&seq);
            self.stats.sender_abandoned += 1;
            self.floor_dirty = true;
        }
        for seq in due {
            let bytes = self.outstanding[&seq].bytes.clone();
            let departure = self.enqueue(now, bytes);
            let o = self.outstanding.get_mut(&seq).expect("present");
            o.last_tx = departure;
            o.retransmitted = true;
            if let Some(c) = self.copy_slot(seq) {
                *c += 1;
            }
            self.stats.retransmissions += 1;
        }
    }

    /// Processes an incoming datagram. Undecodable input is counted and
    /// reported but leaves the state untouched.
    pub fn handle_datagram(&mut self, now: Instant, bytes: &[u8]) -> Result<(), TransportError> {
        if self.closed {
            return Err(TransportError::EndpointClosed);
        }
        self.stats.datagrams_received += 1;
        let seg = match decode_segment(bytes) {
            Ok(seg) => seg,
            Err(e) => {
                self.stats.decode_errors += 1;
                return Err(e.into());
            }
        };
        match seg.kind {
            SegmentKind::Data => self.on_data(now, seg),
            SegmentKind::Parity => self.on_parity(now, seg),
            SegmentKind::Feedback => match FeedbackReport::decode(&seg.payload) {
                Ok(report) => self.on_feedback(now, &report),
                Err(_) => self.stats.decode_errors += 1,
            },
        }
        self.release_gaps(now);
        Ok(())
    }

    fn rx_reference(&self) -> u64 {
        self.rx.highest.unwrap_or(self.rx.next_expected)
    }

    fn on_data(&mut self, now: Instant, seg: TransportSegment) {
        self.stats.data_received += 1;
        let seq = unwrap_seq(self.rx_reference(), seg.seq);
        let Some(base) = seq.checked_sub(seg.group_index as u64) else {
            self.stats.decode_errors += 1;
            return;
        };
        let group = self.rx.groups.entry(base).or_insert_with(|| RxGroup {
            declared_k: seg.k,
            parity_slot: seg.n > seg.k,
            deadline: seg.deadline,
            actual_k: None,
            parity: None,
            blobs: BTreeMap::new(),
        });
        group.declared_k = seg.k;
        group.parity_slot = seg.n > seg.k;
        group.deadline = seg.deadline;
        group
            .blobs
            .entry(seg.group_index)
            .or_insert_with(|| blob(&seg.payload, seg.send_ts_us));

        *self.rx.received.entry(seq).or_insert(0) += 1;
        if self.rx.highest.is_none_or(|h| seq > h) {
            self.rx.highest = Some(seq);
            self.rx.highest_send_ts = seg.send_ts_us;
            self.rx.highest_arrival = now;
        }
        if let Some(h) = self.rx.highest {
            let keep_from = h.saturating_sub(2 * BITMAP_BITS);
            self.rx.received = self.rx.received.split_off(&keep_from);
        }
        self.rx.unreported += 1;
        self.rx.first_unreported_at.get_or_insert(now);
        self.rx.rate_bytes += seg.payload.len() as u64;

        if seq < self.rx.next_expected || self.rx.buffer.contains_key(&seq) {
            self.stats.duplicates += 1;
        } else {
            self.rx.buffer.insert(
                seq,
                Buffered {
                    payload: seg.payload,
                    send_ts: seg.send_ts_us,
                    deadline: seg.deadline,
                    recovered: false,
                },
            );
            if seq > self.rx.next_expected && self.rx.hole_since.is_none() {
                self.rx.hole_since = Some(now);
            }
            self.try_recover(base);
        }
        if self.rx.unreported >= self.cfg.feedback_every_segments {
            self.emit_feedback(now);
        }
    }

    fn on_parity(&mut self, _now: Instant, seg: TransportSegment) {
        let base = unwrap_seq(self.rx_reference(), seg.seq);
        if base + (seg.k as u64) <= self.rx.next_expected {
            return;
        }
        let group = self.rx.groups.entry(base).or_insert_with(|| RxGroup {
            declared_k: seg.k,
            parity_slot: true,
            deadline: seg.deadline,
            actual_k: None,
            parity: None,
            blobs: BTreeMap::new(),
        });
        group.actual_k = Some(seg.k);
        group.parity_slot = true;
        group.deadline = seg.deadline;
        group.parity = Some(seg.payload);
        self.try_recover(base);
    }

    fn try_recover(&mut self, base: u64) {
        let Some(group) = self.rx.groups.get(&base) else {
            return;
        };
        let (Some(k), Some(parity)) = (group.actual_k, group.parity.as_ref()) else {
            return;
        };
        let missing: Vec<u8> = (0..k).filter(|i| !group.blobs.contains_key(i)).collect();
        if missing.len() != 1 {
            return;
        }
        let idx = missing[0];
        let seq = base + idx as u64;
        let present: Vec<Option<&[u8]>> = (0..k)
            .map(|i| group.blobs.get(&i).map(Vec::as_slice))
            .collect();
        let Ok(raw) = recover_from_parity(&present, parity, idx as usize) else {
            return;
        };
        let deadline = group.deadline;
        let group = self.rx.groups.get_mut(&base).expect("present");
        group.blobs.insert(idx, raw.clone());
        if seq < self.rx.next_expected || self.rx.buffer.contains_key(&seq) {
            return;
        }
        let Some((payload, send_ts)) = unblob(&raw) else {
            return;
        };
        self.rx.buffer.insert(
            seq,
            Buffered {
                payload,
                send_ts,
                deadline,
                recovered: true,
            },
        );
        self.stats.recovered += 1;
    }

    /// Group that provably contains `seq`: a later member of it was seen, or
    /// its parity declared a size covering `seq`.
    fn certain_group(&self, seq: u64) -> Option<(u64, &RxGroup)> {
        let (&base, group) = self.rx.groups.range(..=seq).next_back()?;
        let idx = seq - base;
        if idx >= 255 {
            return None;
        }
        let later_member = group.blobs.range((idx as u8 + 1)..).next().is_some();
        let covered = group.actual_k.is_some_and(|k| idx < k as u64);
        (later_member || covered).then_some((base, group))
    }

    fn oldest_buffered_age(&self, now: Instant) -> Option<u64> {
        self.rx.buffer.values().map(|b| age_us(now, b.send_ts)).max()
    }

    fn group_unrecoverable(&self, base: u64, group: &RxGroup) -> bool {
        let highest = self.rx.highest.unwrap_or(0);
        let size = group.actual_k.map_or(group.span(), |k| k as u64);
        let missing = (0..size)
            .filter(|&i| base + i <= highest && !group.blobs.contains_key(&(i as u8)))
            .count();
        missing > usize::from(group.parity_slot)
    }

    fn should_release_hole(&self, now: Instant) -> bool {
        let hole = self.rx.next_expected;
        if hole < self.rx.peer_floor {
            return true;
        }
        let Some((base, group)) = self.certain_group(hole) else {
            return false;
        };
        let Some(deadline_us) = group.deadline.micros() else {
            return false;
        };
        if self.oldest_buffered_age(now).is_some_and(|age| age > deadline_us) {
            return true;
        }
        let retx_fits = self.rtt_estimate_ms() + self.cfg.retransmission_timeout_ms as f64
            <= deadline_us as f64 / 1000.0;
        let grace_over = self
            .rx
            .hole_since
            .is_some_and(|t| now.saturating_since(t) >= Duration::from_millis(self.cfg.reorder_grace_ms));
        !retx_fits && grace_over && self.group_unrecoverable(base, group)
    }

    fn advance(&mut self, now: Instant) {
        self.rx.next_expected += 1;
        self.rx.hole_since = match self.rx.buffer.keys().next() {
            Some(&first) if first > self.rx.next_expected => Some(now),
            _ => None,
        };
        self.rx.advances += 1;
        if self.rx.advances.is_multiple_of(64) {
            let floor = self.rx.next_expected;
            self.rx.groups.retain(|&b, g| b + g.span().max(1) > floor);
        }
    }

    fn release_gaps(&mut self, now: Instant) {
        while !self.rx.buffer.is_empty()
            && !self.rx.buffer.contains_key(&self.rx.next_expected)
            && self.should_release_hole(now)
        {
            self.stats.lost_residual += 1;
            self.advance(now);
        }
    }

    /// Returns the next in-sequence payload, or `WouldBlock`.
    pub fn recv(&mut self, now: Instant, mode: ExpiryMode) -> Result<Delivery, TransportError> {
        if self.closed {
            return Err(TransportError::EndpointClosed);
        }
        loop {
            self.release_gaps(now);
            let seq = self.rx.next_expected;
            let Some(b) = self.rx.buffer.remove(&seq) else {
                return Err(TransportError::WouldBlock);
            };
            self.advance(now);
            let expired = b
                .deadline
                .micros()
                .is_some_and(|d| age_us(now, b.send_ts) > d);
            let delivery = |expired| Delivery {
                payload: b.payload,
                seq: seq as u16,
                send_ts_us: b.send_ts,
                expired,
                recovered_via_parity: b.recovered,
            };
            match (mode, expired) {
                (ExpiryMode::DropExpired, true) => {
                    self.stats.expired_dropped += 1;
                    continue;
                }
                (ExpiryMode::MarkExpired, true) => {
                    self.stats.expired_marked += 1;
                    return Ok(delivery(true));
                }
                _ => {
                    self.stats.delivered += 1;
                    return Ok(delivery(false));
                }
            }
        }
    }

    fn emit_feedback(&mut self, now: Instant) {
        let highest = self.rx.highest;
        let report = match highest {
            Some(top) => {
                let window = top.min(BITMAP_BITS);
                let mut bitmap = 0u32;
                let mut arrivals = 0u32;
                for i in 0..window {
                    if let Some(n) = self.rx.received.get(&(top - 1 - i)) {
                        bitmap |= 1 << i;
                        arrivals += n;
                    }
                }
                let holes = window - bitmap.count_ones() as u64;
                let elapsed = now.saturating_since(self.rx.rate_since).as_secs_f64();
                let rate = if elapsed > 0.0 {
                    (self.rx.rate_bytes as f64 * 8.0 / elapsed).min(u32::MAX as f64) as u32
                } else {
                    0
                };
                FeedbackReport {
                    cumulative_seq: top as u16,
                    next_expected: self.rx.next_expected as u16,
                    ack_bitmap: bitmap,
                    recv_rate_bps: rate,
                    loss_estimate: if window > 0 { holes as f64 / window as f64 } else { 0.0 },
                    echo_ts_us: self.rx.highest_send_ts,
                    echo_delay_us: now.saturating_since(self.rx.highest_arrival).as_micros() as u32,
                    sender_floor: Some(self.sender_floor() as u16),
                    window_arrivals: Some(arrivals.min(u16::MAX as u32) as u16),
                    has_receive_state: true,
                }
            }
            None => FeedbackReport {
                sender_floor: Some(self.sender_floor() as u16),
                ..FeedbackReport::empty()
            },
        };
        let seg = TransportSegment {
            kind: SegmentKind::Feedback,
            seq: 0,
            group_id: 0,
            group_index: 0,
            k: 1,
            n: 1,
            send_ts_us: ts32(now),
            deadline: Deadline::NONE,
            payload: report.encode(),
        };
        let bytes = encode_segment(&seg).expect("feedback fits");
        self.enqueue(now, bytes);
        self.stats.feedback_sent += 1;
        self.rx.unreported = 0;
        self.rx.first_unreported_at = None;
        self.rx.rate_bytes = 0;
        self.rx.rate_since = now;
        self.floor_dirty = false;
    }

    /// Applies a receiver report from the peer.
    pub fn on_feedback(&mut self, now: Instant, report: &FeedbackReport) {
        self.stats.reports_received += 1;
        if let Some(floor) = report.sender_floor {
            let floor = unwrap_seq(self.rx_reference(), floor);
            if floor > self.rx.peer_floor {
                self.rx.peer_floor = floor;
            }
        }
        if !report.has_receive_state {
            return;
        }
        let reference = self.next_seq.saturating_sub(1);
        let top = unwrap_seq(reference, report.cumulative_seq);
        if top >= self.next_seq {
            self.stats.stale_reports += 1;
            return;
        }
        if self.last_report_top.is_some_and(|prev| top < prev) {
            self.stats.stale_reports += 1;
            return;
        }
        self.last_report_top = Some(top);

        // loss over the bitmap window: lost datagrams / sent datagrams when the
        // copy counts are known, else missing sequences / window size
        let window = top.min(BITMAP_BITS);
        if window > 0 {
            let holes = window - (report.ack_bitmap & window_mask(window)).count_ones() as u64;
            let sent: Option<u32> = (1..=window).map(|i| self.copies_of(top - i)).sum();
            let observed = match (report.window_arrivals, sent) {
                (Some(arrived), Some(sent)) if sent > 0 => {
                    (1.0 - arrived as f64 / sent as f64).clamp(0.0, 1.0)
                }
                _ => holes as f64 / window as f64,
            };
            let a = self.cfg.loss_ewma_alpha;
            self.loss_ewma = (1.0 - a) * self.loss_ewma + a * observed;
        }

        let top_retransmitted = self.outstanding.get(&top).is_some_and(|o| o.retransmitted);
        if !top_retransmitted {
            let sample_us = ts32(now)
                .wrapping_sub(report.echo_ts_us)
                .wrapping_sub(report.echo_delay_us);
            if sample_us < 10_000_000 {
                let sample = sample_us as f64 / 1000.0;
                self.srtt_ms = Some(match self.srtt_ms {
                    None => sample,
                    Some(s) => 0.875 * s + 0.125 * sample,
                });
            }
        }

        let floor = unwrap_seq(reference, report.next_expected).min(top + 1);
        self.outstanding = self.outstanding.split_off(&floor);
        self.outstanding.remove(&top);
        for i in 0..window {
            if report.ack_bitmap & (1 << i) != 0 {
                self.outstanding.remove(&(top - 1 - i));
            }
        }
        self.service_outstanding(now);
    }

    fn feedback_due_at(&self) -> Option<Instant> {
        let first = self.rx.first_unreported_at?;
        Some(first + Duration::from_millis(self.cfg.feedback_interval_ms))
    }

    /// Runs timer-driven work: retransmissions, expiry, feedback, gap release.
    pub fn handle_timeout(&mut self, now: Instant) {
        if self.closed {
            return;
        }
        self.service_outstanding(now);
        if self.feedback_due_at().is_some_and(|t| t <= now) || self.floor_dirty {
            self.emit_feedback(now);
        }
        self.release_gaps(now);
    }

    /// Earliest instant at which `handle_timeout` or `poll_transmit` has work.
    pub fn poll_timeout(&self) -> Option<Instant> {
        if self.closed {
            return None;
        }
        let mut next = self.next_departure();
        let mut consider = |t: Instant| {
            next = Some(next.map_or(t, |n: Instant| n.min(t)));
        };
        if let Some(t) = self.feedback_due_at() {
            consider(t);
        }
        let rto = self.rto();
        for o in self.outstanding.values() {
            if let Some(d) = o.deadline.micros() {
                consider(o.first_tx + Duration::from_micros(d + 1));
            }
            if o.reactive {
                consider(o.last_tx + rto + Duration::from_micros(1));
            }
        }
        if let Some(t) = self.hole_release_at() {
            consider(t);
        }
        next
    }

    fn hole_release_at(&self) -> Option<Instant> {
        let hole = self.rx.next_expected;
        if self.rx.buffer.is_empty() || self.rx.buffer.contains_key(&hole) {
            return None;
        }
        let (base, group) = self.certain_group(hole)?;
        let deadline_us = group.deadline.micros()?;
        // ages grow one-for-one with local time, so measure them once at a
        // fixed reference and extrapolate
        let reference = self.rx.highest_arrival;
        let oldest = self.oldest_buffered_age(reference)?;
        let by_age = reference + Duration::from_micros((deadline_us + 1).saturating_sub(oldest));
        let retx_fits = self.rtt_estimate_ms() + self.cfg.retransmission_timeout_ms as f64
            <= deadline_us as f64 / 1000.0;
        let by_grace = match self.rx.hole_since {
            Some(t) if !retx_fits && self.group_unrecoverable(base, group) => {
                Some(t + Duration::from_millis(self.cfg.reorder_grace_ms))
            }
            _ => None,
        };
        Some(by_grace.map_or(by_age, |g| g.min(by_age)))
    }
}
