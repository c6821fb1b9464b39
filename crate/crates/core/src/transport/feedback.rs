//! Report carried in Feedback segments.
//!
//! Payload layout (big-endian, 27 bytes):
//! `flags u8 | cumulative_seq u16 | next_expected u16 | ack_bitmap u32 |
//!  recv_rate_bps u32 | loss_estimate u16 (x/65535) | echo_ts_us u32 |
//!  echo_delay_us u32 | sender_floor u16 | window_arrivals u16`
//!
//! Flag bit 0: the receive-side fields are meaningful. Bit 1: `sender_floor`
//! is present. Bit 2: `window_arrivals` is present.

use thiserror::Error;

pub const REPORT_LEN: usize = 27;

const HAS_RECEIVE_STATE: u8 = 0x01;
const HAS_SENDER_FLOOR: u8 = 0x02;
const HAS_WINDOW_ARRIVALS: u8 = 0x04;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackReport {
    /// Highest sequence number received so far.
    pub cumulative_seq: u16,
    /// Next sequence the receiver will deliver; everything before it is
    /// resolved (delivered, expired or given up).
    pub next_expected: u16,
    /// Bit `i` set means `cumulative_seq - 1 - i` was received.
    pub ack_bitmap: u32,
    pub recv_rate_bps: u32,
    pub loss_estimate: f64,
    /// `send_ts_us` of the segment carrying `cumulative_seq`.
    pub echo_ts_us: u32,
    /// Time that segment spent at the receiver before this report left.
    pub echo_delay_us: u32,
    /// Lowest sequence the reporting endpoint's own sender still stands
    /// behind; the peer may stop waiting for anything below it.
    pub sender_floor: Option<u16>,
    /// Data datagrams received, duplicates included, for the bitmap window.
    pub window_arrivals: Option<u16>,
    pub has_receive_state: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FeedbackError {
    #[error("feedback payload must be {REPORT_LEN} bytes, got {0}")]
    BadLength(usize),
}

impl FeedbackReport {
    /// Report with no receive state and no sender floor.
    pub fn empty() -> Self {
        FeedbackReport {
            cumulative_seq: 0,
            next_expected: 0,
            ack_bitmap: 0,
            recv_rate_bps: 0,
            loss_estimate: 0.0,
            echo_ts_us: 0,
            echo_delay_us: 0,
            sender_floor: None,
            window_arrivals: None,
            has_receive_state: false,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(REPORT_LEN);
        let mut flags = 0;
        if self.has_receive_state {
            flags |= HAS_RECEIVE_STATE;
        }
        if self.sender_floor.is_some() {
            flags |= HAS_SENDER_FLOOR;
        }
        if self.window_arrivals.is_some() {
            flags |= HAS_WINDOW_ARRIVALS;
        }
        out.push(flags);
        out.extend_from_slice(&self.cumulative_seq.to_be_bytes());
        out.extend_from_slice(&self.next_expected.to_be_bytes());
        out.extend_from_slice(&self.ack_bitmap.to_be_bytes());
        out.extend_from_slice(&self.recv_rate_bps.to_be_bytes());
        let loss = (self.loss_estimate.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&loss.to_be_bytes());
        out.extend_from_slice(&self.echo_ts_us.to_be_bytes());
        out.extend_from_slice(&self.echo_delay_us.to_be_bytes());
        out.extend_from_slice(&self.sender_floor.unwrap_or(0).to_be_bytes());
        out.extend_from_slice(&self.window_arrivals.unwrap_or(0).to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FeedbackError> {
        if bytes.len() != REPORT_LEN {
            return Err(FeedbackError::BadLength(bytes.len()));
        }
        let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_be_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let flags = bytes[0];
        Ok(FeedbackReport {
            has_receive_state: flags & HAS_RECEIVE_STATE != 0,
            cumulative_seq: u16_at(1),
            next_expected: u16_at(3),
            ack_bitmap: u32_at(5),
            recv_rate_bps: u32_at(9),
            loss_estimate: u16_at(13) as f64 / 65535.0,
            echo_ts_us: u32_at(15),
            echo_delay_us: u32_at(19),
            sender_floor: (flags & HAS_SENDER_FLOOR != 0).then(|| u16_at(23)),
            window_arrivals: (flags & HAS_WINDOW_ARRIVALS != 0).then(|| u16_at(25)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let r = FeedbackReport {
            cumulative_seq: 700,
            next_expected: 650,
            ack_bitmap: 0xDEAD_BEEF,
            recv_rate_bps: 123_456,
            loss_estimate: 0.25,
            echo_ts_us: 99,
            echo_delay_us: 7,
            sender_floor: Some(12),
            window_arrivals: Some(40),
            has_receive_state: true,
        };
        let bytes = r.encode();
        assert_eq!(bytes.len(), REPORT_LEN);
        let back = FeedbackReport::decode(&bytes).unwrap();
        assert_eq!(back.cumulative_seq, 700);
        assert_eq!(back.next_expected, 650);
        assert_eq!(back.ack_bitmap, 0xDEAD_BEEF);
        assert_eq!(back.echo_delay_us, 7);
        assert_eq!(back.sender_floor, Some(12));
        assert_eq!(back.window_arrivals, Some(40));
        assert!(back.has_receive_state);
        assert!((back.loss_estimate - 0.25).abs() < 1e-4);
        assert_eq!(FeedbackReport::decode(&bytes[1..]), Err(FeedbackError::BadLength(26)));
    }

    #[test]
    fn empty_report_carries_no_state() {
        let back = FeedbackReport::decode(&FeedbackReport::empty().encode()).unwrap();
        assert!(!back.has_receive_state);
        assert_eq!(back.sender_floor, None);
        assert_eq!(back.window_arrivals, None);
    }
}
