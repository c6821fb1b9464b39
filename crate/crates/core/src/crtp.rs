//! CRTP application framing.
//!
//! ```text
//!  bit  7 6 5 4 | 3 2      | 1 0
//!       port    | reserved | channel      followed by 0..=30 payload bytes
//! ```
//!
//! Request and response packets carry an 8-bit wrapping correlation token in
//! payload byte 0. Setpoints go to the commander port and are never answered.

use thiserror::Error;

pub const MAX_PAYLOAD: usize = 30;
pub const MAX_ENCODED: usize = MAX_PAYLOAD + 1;

/// Commander port, carries setpoints.
pub const COMMANDER_PORT: u8 = 3;
/// Link-service port used for request/response exchanges (echo-style).
pub const LINK_PORT: u8 = 15;
pub const SETPOINT_PAYLOAD_LEN: usize = 14;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CrtpError {
    #[error("empty input")]
    EmptyInput,
    #[error("packet of {0} bytes exceeds the 31-byte maximum")]
    Oversize(usize),
    #[error("reserved header bits set in {0:#04x}")]
    ReservedBitsSet(u8),
    #[error("port {0} out of range 0..=15")]
    BadPort(u8),
    #[error("channel {0} out of range 0..=3")]
    BadChannel(u8),
    #[error("payload of {0} bytes exceeds 30")]
    PayloadTooLarge(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PacketKind {
    Setpoint,
    Request,
    Response,
}

impl PacketKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PacketKind::Setpoint => "setpoint",
            PacketKind::Request => "request",
            PacketKind::Response => "response",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "setpoint" => Some(PacketKind::Setpoint),
            "request" => Some(PacketKind::Request),
            "response" => Some(PacketKind::Response),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrtpPacket {
    port: u8,
    channel: u8,
    payload: Vec<u8>,
}

impl CrtpPacket {
    pub fn new(port: u8, channel: u8, payload: Vec<u8>) -> Result<Self, CrtpError> {
        if port > 15 {
            return Err(CrtpError::BadPort(port));
        }
        if channel > 3 {
            return Err(CrtpError::BadChannel(channel));
        }
        if payload.len() > MAX_PAYLOAD {
            return Err(CrtpError::PayloadTooLarge(payload.len()));
        }
        Ok(CrtpPacket {
            port,
            channel,
            payload,
        })
    }

    pub fn port(&self) -> u8 {
        self.port
    }

    pub fn channel(&self) -> u8 {
        self.channel
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn encoded_len(&self) -> usize {
        1 + self.payload.len()
    }

    pub fn header(&self) -> u8 {
        (self.port << 4) | self.channel
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.header());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CrtpError> {
        let (&header, payload) = bytes.split_first().ok_or(CrtpError::EmptyInput)?;
        if bytes.len() > MAX_ENCODED {
            return Err(CrtpError::Oversize(bytes.len()));
        }
        if header & 0b0000_1100 != 0 {
            return Err(CrtpError::ReservedBitsSet(header));
        }
        Ok(CrtpPacket {
            port: header >> 4,
            channel: header & 0b11,
            payload: payload.to_vec(),
        })
    }

    /// Classification as seen by the drone: commander traffic is a setpoint,
    /// anything else expects an answer.
    pub fn uplink_kind(&self) -> PacketKind {
        if self.port == COMMANDER_PORT {
            PacketKind::Setpoint
        } else {
            PacketKind::Request
        }
    }

    /// Correlation token of a request or response.
    pub fn token(&self) -> Option<u8> {
        match self.uplink_kind() {
            PacketKind::Setpoint => None,
            _ => self.payload.first().copied(),
        }
    }
}

pub fn encode_crtp(packet: &CrtpPacket) -> Vec<u8> {
    packet.encode()
}

pub fn decode_crtp(bytes: &[u8]) -> Result<CrtpPacket, CrtpError> {
    CrtpPacket::decode(bytes)
}

/// Attitude setpoint: roll, pitch, yaw rate as little-endian f32, thrust as
/// little-endian u16.
pub fn make_setpoint(roll: f32, pitch: f32, yawrate: f32, thrust: u16) -> CrtpPacket {
    let mut payload = Vec::with_capacity(SETPOINT_PAYLOAD_LEN);
    payload.extend_from_slice(&roll.to_le_bytes());
    payload.extend_from_slice(&pitch.to_le_bytes());
    payload.extend_from_slice(&yawrate.to_le_bytes());
    payload.extend_from_slice(&thrust.to_le_bytes());
    CrtpPacket {
        port: COMMANDER_PORT,
        channel: 0,
        payload,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Setpoint {
    pub roll: f32,
    pub pitch: f32,
    pub yawrate: f32,
    pub thrust: u16,
}

impl Setpoint {
    pub fn from_packet(packet: &CrtpPacket) -> Option<Setpoint> {
        let p = packet.payload();
        if packet.port() != COMMANDER_PORT || p.len() != SETPOINT_PAYLOAD_LEN {
            return None;
        }
        let f = |i: usize| f32::from_le_bytes([p[i], p[i + 1], p[i + 2], p[i + 3]]);
        Some(Setpoint {
            roll: f(0),
            pitch: f(4),
            yawrate: f(8),
            thrust: u16::from_le_bytes([p[12], p[13]]),
        })
    }
}

/// Request with the given token, zero-padded to `payload_len` bytes (min 1).
pub fn make_request(token: u8, payload_len: usize) -> CrtpPacket {
    let len = payload_len.clamp(1, MAX_PAYLOAD);
    let mut payload = vec![0u8; len];
    payload[0] = token;
    CrtpPacket {
        port: LINK_PORT,
        channel: 0,
        payload,
    }
}

/// Response to `request`: same port, channel and payload (token echoed).
pub fn make_response(request: &CrtpPacket) -> CrtpPacket {
    request.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        let p = CrtpPacket::new(1, 2, vec![0xAA]).unwrap();
        assert_eq!(encode_crtp(&p), vec![0x12, 0xAA]);
        let p = CrtpPacket::new(0, 0, vec![]).unwrap();
        assert_eq!(encode_crtp(&p), vec![0x00]);
        let p = CrtpPacket::new(15, 3, vec![0x01, 0x02]).unwrap();
        assert_eq!(encode_crtp(&p), vec![0xF3, 0x01, 0x02]);
    }

    #[test]
    fn decode_examples() {
        let p = decode_crtp(&[0x12, 0xAA]).unwrap();
        assert_eq!((p.port(), p.channel(), p.payload()), (1, 2, &[0xAA][..]));
        assert_eq!(decode_crtp(&[]), Err(CrtpError::EmptyInput));
        assert_eq!(decode_crtp(&[0x1E]), Err(CrtpError::ReservedBitsSet(0x1E)));
        assert_eq!(decode_crtp(&[0u8; 32]), Err(CrtpError::Oversize(32)));
    }

    #[test]
    fn constructor_bounds() {
        assert_eq!(CrtpPacket::new(16, 0, vec![]), Err(CrtpError::BadPort(16)));
        assert_eq!(CrtpPacket::new(0, 4, vec![]), Err(CrtpError::BadChannel(4)));
        assert_eq!(
            CrtpPacket::new(0, 0, vec![0; 31]),
            Err(CrtpError::PayloadTooLarge(31))
        );
    }

    #[test]
    fn setpoint_layout() {
        let zero = make_setpoint(0.0, 0.0, 0.0, 0);
        assert_eq!(zero.port(), COMMANDER_PORT);
        assert_eq!(zero.channel(), 0);
        assert_eq!(zero.payload(), &[0u8; 14]);
        assert_eq!(zero.uplink_kind(), PacketKind::Setpoint);

        let roll = make_setpoint(1.0, 0.0, 0.0, 1000);
        assert_eq!(&roll.payload()[0..4], &[0x00, 0x00, 0x80, 0x3F]);

        let full = make_setpoint(0.0, 0.0, 0.0, 65535);
        assert_eq!(&full.payload()[12..14], &[0xFF, 0xFF]);
        assert_eq!(Setpoint::from_packet(&full).unwrap().thrust, 65535);
    }

    #[test]
    fn request_response_token() {
        let req = make_request(7, 14);
        assert_eq!(req.payload().len(), 14);
        assert_eq!(req.uplink_kind(), PacketKind::Request);
        assert_eq!(req.token(), Some(7));
        assert_eq!(make_response(&req).token(), Some(7));
        assert_eq!(make_setpoint(0.0, 0.0, 0.0, 0).token(), None);
    }

    fn packet() -> impl Strategy<Value = CrtpPacket> {
        (0u8..16, 0u8..4, proptest::collection::vec(any::<u8>(), 0..=30))
            .prop_map(|(p, c, pl)| CrtpPacket::new(p, c, pl).unwrap())
    }

    proptest! {
        #[test]
        fn round_trip(p in packet()) {
            let bytes = encode_crtp(&p);
            prop_assert_eq!(bytes.len(), 1 + p.payload().len());
            prop_assert_eq!(decode_crtp(&bytes).unwrap(), p);
        }

        #[test]
        fn oversize_never_decodes(bytes in proptest::collection::vec(any::<u8>(), 32..64)) {
            prop_assert!(decode_crtp(&bytes).is_err());
        }

        #[test]
        fn setpoint_is_always_14_bytes(r in any::<f32>(), p in any::<f32>(), y in any::<f32>(), t in any::<u16>()) {
            prop_assert_eq!(make_setpoint(r, p, y, t).payload().len(), 14);
        }
    }
}
