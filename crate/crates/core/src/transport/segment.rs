//! Wire format of a transport segment.
//!
//! ```text
//!  0        1        2        3        4        5        6        7
//! +--------+--------+--------+--------+--------+--------+--------+--------+
//! |ver|kind|       seq       |    group_id     | g_index|   k    |   n    |
//! +--------+--------+--------+--------+--------+--------+--------+--------+
//! |            send_ts_us             |   deadline_ms   |   payload_len   |
//! +--------+--------+--------+--------+--------+--------+--------+--------+
//! |  payload ...
//! ```
//!
//! Multi-byte fields are big-endian. A deadline of `0xFFFF` means "none".

use thiserror::Error;

pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
pub const MAX_SEGMENT_PAYLOAD: usize = 1400;
pub const NO_DEADLINE: u16 = 0xFFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SegmentKind {
    Data = 0,
    Parity = 1,
    Feedback = 2,
}

impl SegmentKind {
    fn from_nibble(v: u8) -> Option<Self> {
        match v {
            0 => Some(SegmentKind::Data),
            1 => Some(SegmentKind::Parity),
            2 => Some(SegmentKind::Feedback),
            _ => None,
        }
    }
}

/// Relative deadline in milliseconds. `None` on the wire is `0xFFFF`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Deadline(Option<u16>);

impl Deadline {
    pub const NONE: Deadline = Deadline(None);

    /// Values of 0xFFFF and above saturate to 0xFFFE.
    pub fn from_millis(ms: u64) -> Self {
        Deadline(Some(ms.min(NO_DEADLINE as u64 - 1) as u16))
    }

    pub fn from_wire(v: u16) -> Self {
        if v == NO_DEADLINE {
            Deadline(None)
        } else {
            Deadline(Some(v))
        }
    }

    pub fn to_wire(self) -> u16 {
        self.0.unwrap_or(NO_DEADLINE)
    }

    pub fn millis(self) -> Option<u16> {
        self.0
    }

    pub fn micros(self) -> Option<u64> {
        self.0.map(|ms| ms as u64 * 1000)
    }

    pub fn is_none(self) -> bool {
        self.0.is_none()
    }
}

impl From<Option<u64>> for Deadline {
    fn from(v: Option<u64>) -> Self {
        v.map_or(Deadline::NONE, Deadline::from_millis)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportSegment {
    pub kind: SegmentKind,
    pub seq: u16,
    pub group_id: u16,
    pub group_index: u8,
    pub k: u8,
    pub n: u8,
    pub send_ts_us: u32,
    pub deadline: Deadline,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentError {
    #[error("payload of {0} bytes exceeds 1400")]
    PayloadTooLarge(usize),
    #[error("truncated segment: {0} bytes, header needs 16")]
    Truncated(usize),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown segment kind {0}")]
    BadKind(u8),
    #[error("declared payload length {declared} but {actual} bytes follow the header")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("invalid coding group parameters k={k} n={n} index={index} for {kind:?}")]
    BadGroup {
        kind: SegmentKind,
        k: u8,
        n: u8,
        index: u8,
    },
}

impl TransportSegment {
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    fn check_group(&self) -> Result<(), SegmentError> {
        let ok = self.k >= 1
            && self.n >= self.k
            && self.n - self.k <= 1
            && self.group_index < self.n
            && match self.kind {
                SegmentKind::Data => self.group_index < self.k,
                SegmentKind::Parity => self.group_index >= self.k,
                SegmentKind::Feedback => true,
            };
        if ok {
            Ok(())
        } else {
            Err(SegmentError::BadGroup {
                kind: self.kind,
                k: self.k,
                n: self.n,
                index: self.group_index,
            })
        }
    }
}

pub fn encode_segment(seg: &TransportSegment) -> Result<Vec<u8>, SegmentError> {
    if seg.payload.len() > MAX_SEGMENT_PAYLOAD {
        return Err(SegmentError::PayloadTooLarge(seg.payload.len()));
    }
    seg.check_group()?;
    let mut out = Vec::with_capacity(seg.encoded_len());
    out.push((VERSION << 4) | seg.kind as u8);
    out.extend_from_slice(&seg.seq.to_be_bytes());
    out.extend_from_slice(&seg.group_id.to_be_bytes());
    out.push(seg.group_index);
    out.push(seg.k);
    out.push(seg.n);
    out.extend_from_slice(&seg.send_ts_us.to_be_bytes());
    out.extend_from_slice(&seg.deadline.to_wire().to_be_bytes());
    out.extend_from_slice(&(seg.payload.len() as u16).to_be_bytes());
    out.extend_from_slice(&seg.payload);
    Ok(out)
}

pub fn decode_segment(bytes: &[u8]) -> Result<TransportSegment, SegmentError> {
    if bytes.len() < HEADER_LEN {
        return Err(SegmentError::Truncated(bytes.len()));
    }
    let version = bytes[0] >> 4;
    if version != VERSION {
        return Err(SegmentError::BadVersion(version));
    }
    let kind = SegmentKind::from_nibble(bytes[0] & 0x0F)
        .ok_or(SegmentError::BadKind(bytes[0] & 0x0F))?;
    let be16 = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
    let declared = be16(14) as usize;
    let actual = bytes.len() - HEADER_LEN;
    if declared != actual {
        return Err(SegmentError::LengthMismatch { declared, actual });
    }
    if actual > MAX_SEGMENT_PAYLOAD {
        return Err(SegmentError::PayloadTooLarge(actual));
    }
    let seg = TransportSegment {
        kind,
        seq: be16(1),
        group_id: be16(3),
        group_index: bytes[5],
        k: bytes[6],
        n: bytes[7],
        send_ts_us: u32::from_be_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]),
        deadline: Deadline::from_wire(be16(12)),
        payload: bytes[HEADER_LEN..].to_vec(),
    };
    seg.check_group()?;
    Ok(seg)
}

/// Serial-number comparison over 16-bit sequence space (window 2^15).
pub fn seq_less(a: u16, b: u16) -> bool {
    a != b && b.wrapping_sub(a) < 0x8000
}

/// Maps a 16-bit wire value onto the 64-bit counter closest to `reference`.
pub fn unwrap_seq(reference: u64, wire: u16) -> u64 {
    let delta = wire.wrapping_sub(reference as u16) as i16 as i64;
    (reference as i64 + delta).max(0) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn data_seg() -> TransportSegment {
        TransportSegment {
            kind: SegmentKind::Data,
            seq: 1,
            group_id: 0,
            group_index: 0,
            k: 4,
            n: 5,
            send_ts_us: 0,
            deadline: Deadline::NONE,
            payload: vec![],
        }
    }

    #[test]
    fn encode_example_layout() {
        assert_eq!(
            encode_segment(&data_seg()).unwrap(),
            vec![0x10, 0x00, 0x01, 0x00, 0x00, 0x00, 0x04, 0x05, 0, 0, 0, 0, 0xFF, 0xFF, 0x00, 0x00]
        );
    }

    #[test]
    fn oversize_payload() {
        let mut s = data_seg();
        s.payload = vec![0; 1401];
        assert_eq!(encode_segment(&s), Err(SegmentError::PayloadTooLarge(1401)));
        s.payload.pop();
        assert!(encode_segment(&s).is_ok());
    }

    #[test]
    fn decode_errors() {
        assert_eq!(decode_segment(&[0x10; 10]), Err(SegmentError::Truncated(10)));
        let mut bytes = encode_segment(&data_seg()).unwrap();
        bytes[0] = 0x20;
        assert_eq!(decode_segment(&bytes), Err(SegmentError::BadVersion(2)));
        bytes[0] = 0x13;
        assert_eq!(decode_segment(&bytes), Err(SegmentError::BadKind(3)));
        let mut bytes = encode_segment(&data_seg()).unwrap();
        bytes.push(0);
        assert_eq!(
            decode_segment(&bytes),
            Err(SegmentError::LengthMismatch { declared: 0, actual: 1 })
        );
    }

    #[test]
    fn group_invariants_enforced() {
        let mut s = data_seg();
        s.group_index = 4;
        assert!(encode_segment(&s).is_err());
        s.kind = SegmentKind::Parity;
        assert!(encode_segment(&s).is_ok());
        s.n = 6;
        assert!(encode_segment(&s).is_err());
    }

    #[test]
    fn decode_inverts_example() {
        let bytes = encode_segment(&data_seg()).unwrap();
        assert_eq!(decode_segment(&bytes).unwrap(), data_seg());
    }

    #[test]
    fn serial_arithmetic() {
        assert!(seq_less(1, 2));
        assert!(seq_less(0xFFFF, 0));
        assert!(!seq_less(0, 0xFFFF));
        assert!(!seq_less(5, 5));
        assert_eq!(unwrap_seq(65_530, 3), 65_539);
        assert_eq!(unwrap_seq(65_539, 65_534), 65_534);
        assert_eq!(unwrap_seq(0, 0xFFFF), 0);
    }

    pub(crate) fn segment() -> impl Strategy<Value = TransportSegment> {
        (
            0u8..3,
            any::<u16>(),
            any::<u16>(),
            1u8..=254,
            any::<bool>(),
            any::<u32>(),
            any::<u16>(),
            proptest::collection::vec(any::<u8>(), 0..64),
            any::<u8>(),
        )
            .prop_map(|(kind, seq, gid, k, parity, ts, dl, payload, idx)| {
                let kind = SegmentKind::from_nibble(kind).unwrap();
                let n = if parity || kind == SegmentKind::Parity { k + 1 } else { k };
                let group_index = match kind {
                    SegmentKind::Data => idx % k,
                    SegmentKind::Parity => k,
                    SegmentKind::Feedback => idx % n,
                };
                TransportSegment {
                    kind,
                    seq,
                    group_id: gid,
                    group_index,
                    k,
                    n,
                    send_ts_us: ts,
                    deadline: Deadline::from_wire(dl),
                    payload,
                }
            })
    }

    proptest! {
        #[test]
        fn round_trip(seg in segment()) {
            let bytes = encode_segment(&seg).unwrap();
            prop_assert_eq!(bytes.len(), HEADER_LEN + seg.payload.len());
            prop_assert_eq!(decode_segment(&bytes).unwrap(), seg);
        }

        #[test]
        fn unwrap_is_inverse_of_truncation(base in 0u64..1_000_000, delta in -30_000i64..30_000) {
            let target = (base as i64 + delta).max(0) as u64;
            prop_assert_eq!(unwrap_seq(base, target as u16), target);
        }
    }
}
