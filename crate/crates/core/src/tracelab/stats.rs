use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use super::{Stage, TraceRecord};
use crate::controller::{Direction, PacketLogRecord};
use crate::crtp::PacketKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TracelabError {
    #[error("no samples")]
    EmptyInput,
    #[error("trace is missing the {0} timestamp")]
    MissingTimestamp(&'static str),
}

/// Gaps between consecutive outgoing packets of any kind.
pub fn ipt(log: &[PacketLogRecord]) -> Vec<u64> {
    let outs: Vec<u64> = log
        .iter()
        .filter(|r| r.direction == Direction::Out)
        .map(|r| r.timestamp.as_micros())
        .collect();
    outs.windows(2).map(|w| w[1].saturating_sub(w[0])).collect()
}

/// First response minus first request, per answered token, in token order.
pub fn rtt(log: &[PacketLogRecord]) -> Vec<u64> {
    let mut first_out: BTreeMap<u32, u64> = BTreeMap::new();
    let mut first_in: BTreeMap<u32, u64> = BTreeMap::new();
    for r in log {
        let Some(token) = r.token else { continue };
        let t = r.timestamp.as_micros();
        match (r.kind, r.direction) {
            (PacketKind::Request, Direction::Out) => {
                first_out.entry(token).or_insert(t);
            }
            (PacketKind::Response, Direction::In) => {
                first_in.entry(token).or_insert(t);
            }
            _ => {}
        }
    }
    first_out
        .iter()
        .filter_map(|(token, out)| first_in.get(token).map(|inn| inn.saturating_sub(*out)))
        .collect()
}

/// Empirical CDF over the distinct sample values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CdfSeries {
    pub values: Vec<u64>,
    pub fractions: Vec<f64>,
}

impl CdfSeries {
    pub fn points(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.values.iter().copied().zip(self.fractions.iter().copied())
    }

    /// Fraction of samples `<= v`.
    pub fn at(&self, v: u64) -> f64 {
        match self.values.partition_point(|&x| x <= v) {
            0 => 0.0,
            i => self.fractions[i - 1],
        }
    }
}

pub fn cdf(samples: &[u64]) -> Result<CdfSeries, TracelabError> {
    if samples.is_empty() {
        return Err(TracelabError::EmptyInput);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let mut values = Vec::new();
    let mut fractions = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        if sorted.get(i + 1) == Some(&v) {
            continue;
        }
        values.push(v);
        fractions.push((i + 1) as f64 / n);
    }
    Ok(CdfSeries { values, fractions })
}

/// Type-7 quantile of ascending `sorted` data, `p` in [0, 1].
pub fn quantile(sorted: &[f64], p: f64) -> Result<f64, TracelabError> {
    if sorted.is_empty() {
        return Err(TracelabError::EmptyInput);
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageStats {
    pub count: usize,
    pub min: f64,
    pub whisker_low: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub whisker_high: f64,
    pub max: f64,
    /// Samples beyond the whiskers.
    pub outliers: usize,
}

pub fn boxstats(samples: &[f64]) -> Result<StageStats, TracelabError> {
    if samples.is_empty() {
        return Err(TracelabError::EmptyInput);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let q1 = quantile(&s, 0.25)?;
    let median = quantile(&s, 0.5)?;
    let q3 = quantile(&s, 0.75)?;
    let fence = 1.5 * (q3 - q1);
    let (lo_fence, hi_fence) = (q1 - fence, q3 + fence);
    let inside = || s.iter().copied().filter(|&v| v >= lo_fence && v <= hi_fence);
    // the quartiles lie inside the fences, so some sample always does too
    let whisker_low = inside().next().unwrap_or(s[0]);
    let whisker_high = inside().next_back().unwrap_or(s[s.len() - 1]);
    Ok(StageStats {
        count: s.len(),
        min: s[0],
        whisker_low,
        q1,
        median,
        q3,
        whisker_high,
        max: s[s.len() - 1],
        outliers: s.len() - inside().count(),
    })
}

pub const INTERVAL_NAMES: [&str; 6] = [
    "end_to_end",
    "transport_roundtrip",
    "bridge_residence",
    "serial_roundtrip",
    "drone_processing",
    "packet_handling",
];

/// Per-request stage intervals in microseconds. Signed because live traces
/// mix clocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageIntervals {
    pub end_to_end: i64,
    pub transport_roundtrip: i64,
    pub bridge_residence: i64,
    pub serial_roundtrip: i64,
    pub drone_processing: i64,
    pub packet_handling: i64,
}

impl StageIntervals {
    /// Values in [`INTERVAL_NAMES`] order.
    pub fn values(&self) -> [i64; 6] {
        [
            self.end_to_end,
            self.transport_roundtrip,
            self.bridge_residence,
            self.serial_roundtrip,
            self.drone_processing,
            self.packet_handling,
        ]
    }
}

fn stamp(trace: &TraceRecord, stage: Stage) -> Result<i64, TracelabError> {
    trace
        .get(stage)
        .map(|t| t.as_micros() as i64)
        .ok_or(TracelabError::MissingTimestamp(stage.as_str()))
}

pub fn end_to_end(trace: &TraceRecord) -> Result<i64, TracelabError> {
    Ok(stamp(trace, Stage::ControllerRecv)? - stamp(trace, Stage::ControllerSend)?)
}

/// Splits a complete bridged trace into its intervals. The transport stamps
/// are not needed.
pub fn stage_decompose(trace: &TraceRecord) -> Result<StageIntervals, TracelabError> {
    let send = stamp(trace, Stage::ControllerSend)?;
    let bridge_in = stamp(trace, Stage::BridgeIn)?;
    let serial_tx = stamp(trace, Stage::SerialTx)?;
    let drone_rx = stamp(trace, Stage::DroneRx)?;
    let drone_tx = stamp(trace, Stage::DroneTx)?;
    let serial_rx = stamp(trace, Stage::SerialRx)?;
    let bridge_out = stamp(trace, Stage::BridgeOut)?;
    let recv = stamp(trace, Stage::ControllerRecv)?;
    let bridge_residence = bridge_out - bridge_in;
    let serial_roundtrip = serial_rx - serial_tx;
    Ok(StageIntervals {
        end_to_end: recv - send,
        transport_roundtrip: (bridge_in - send) + (recv - bridge_out),
        bridge_residence,
        serial_roundtrip,
        drone_processing: drone_tx - drone_rx,
        packet_handling: bridge_residence - serial_roundtrip,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::Instant;

    fn rec(token: Option<u32>, kind: PacketKind, direction: Direction, ms: u64) -> PacketLogRecord {
        PacketLogRecord {
            token,
            kind,
            direction,
            timestamp: Instant::from_millis(ms),
        }
    }

    #[test]
    fn ipt_examples() {
        let log = [
            rec(None, PacketKind::Setpoint, Direction::Out, 0),
            rec(Some(0), PacketKind::Request, Direction::Out, 8),
            rec(Some(0), PacketKind::Response, Direction::In, 9),
            rec(None, PacketKind::Setpoint, Direction::Out, 208),
        ];
        assert_eq!(ipt(&log), [8_000, 200_000]);
        assert!(ipt(&log[..1]).is_empty());
        let same = [log[0], log[0]];
        assert_eq!(ipt(&same), [0]);
    }

    #[test]
    fn rtt_examples() {
        let log = [
            rec(Some(0), PacketKind::Request, Direction::Out, 0),
            rec(Some(0), PacketKind::Response, Direction::In, 9),
            rec(Some(1), PacketKind::Request, Direction::Out, 10),
            rec(Some(1), PacketKind::Request, Direction::Out, 60),
            rec(Some(1), PacketKind::Response, Direction::In, 68),
            rec(Some(1), PacketKind::Response, Direction::In, 70),
            rec(Some(2), PacketKind::Request, Direction::Out, 80),
        ];
        assert_eq!(rtt(&log), [9_000, 58_000]);
    }

    #[test]
    fn cdf_examples() {
        let c = cdf(&[1, 2, 2, 4]).unwrap();
        assert_eq!(c.points().collect::<Vec<_>>(), [(1, 0.25), (2, 0.75), (4, 1.0)]);
        assert_eq!(cdf(&[5]).unwrap().points().collect::<Vec<_>>(), [(5, 1.0)]);
        assert_eq!(cdf(&[3, 3, 3]).unwrap().points().collect::<Vec<_>>(), [(3, 1.0)]);
        assert_eq!(cdf(&[]), Err(TracelabError::EmptyInput));
        assert_eq!(c.at(0), 0.0);
        assert_eq!(c.at(3), 0.75);
    }

    #[test]
    fn boxstats_examples() {
        let b = boxstats(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((b.q1, b.median, b.q3), (2.0, 3.0, 4.0));
        let b = boxstats(&[7.0]).unwrap();
        assert_eq!(
            [b.min, b.whisker_low, b.q1, b.median, b.q3, b.whisker_high, b.max],
            [7.0; 7]
        );
        // q1 = 1, q3 = 25.75, upper fence 62.875
        let b = boxstats(&[1.0, 1.0, 1.0, 100.0]).unwrap();
        assert_eq!(b.q3, 25.75);
        assert_eq!(b.whisker_high, 1.0);
        assert_eq!(b.outliers, 1);
        assert_eq!(b.max, 100.0);
    }

    #[test]
    fn decomposition_example() {
        let stages = [
            (Stage::ControllerSend, 0),
            (Stage::TransportTx, 3200),
            (Stage::BridgeIn, 3400),
            (Stage::SerialTx, 3900),
            (Stage::DroneRx, 4000),
            (Stage::DroneTx, 4100),
            (Stage::SerialRx, 4600),
            (Stage::BridgeOut, 4800),
            (Stage::ControllerRecv, 8000),
        ];
        let mut t = TraceRecord::new(0);
        for (s, us) in stages {
            t.set(s, Instant::from_micros(us));
        }
        let d = stage_decompose(&t).unwrap();
        assert_eq!(d.end_to_end, 8000);
        assert_eq!(d.bridge_residence, 1400);
        assert_eq!(d.serial_roundtrip, 700);
        assert_eq!(d.drone_processing, 100);
        assert_eq!(d.packet_handling, 700);
        assert_eq!(d.end_to_end, d.transport_roundtrip + d.bridge_residence);

        let mut flat = TraceRecord::new(1);
        for s in Stage::ALL {
            flat.set(s, Instant::from_micros(42));
        }
        assert_eq!(stage_decompose(&flat).unwrap().values(), [0; 6]);

        let mut partial = TraceRecord::new(2);
        for (s, us) in stages.iter().filter(|(s, _)| *s != Stage::BridgeOut) {
            partial.set(*s, Instant::from_micros(*us));
        }
        assert_eq!(
            stage_decompose(&partial),
            Err(TracelabError::MissingTimestamp("bridge_out"))
        );
    }
}
