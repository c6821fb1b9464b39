//! Deadline-aware, partially reliable datagram transport.

mod connection;
pub mod feedback;
mod live;
pub mod parity;
pub mod redundancy;
pub mod segment;
pub mod testbed;

pub use connection::{Connection, Delivery, ExpiryMode, SendReceipt, TransportError, TransportStats};
pub use live::UdpEndpoint;
pub use feedback::{FeedbackError, FeedbackReport};
pub use parity::{build_parity, recover_from_parity, ParityError};
pub use redundancy::{
    group_residual_loss, pacing_gap, select_redundancy, RedundancyPlan, TransportConfig,
    TransportConfigError,
};
pub use segment::{
    decode_segment, encode_segment, seq_less, unwrap_seq, Deadline, SegmentError, SegmentKind,
    TransportSegment, HEADER_LEN, MAX_SEGMENT_PAYLOAD,
};
