//! Redundancy selection and pacing arithmetic.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::segment::Deadline;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportConfig {
    pub bottleneck_rate_bps: u64,
    pub target_residual_loss: f64,
    pub retransmission_timeout_ms: u64,
    /// Deadline applied by callers that do not pick one; `None` means no deadline.
    pub default_deadline_ms: Option<u64>,
    pub coding_group_k: u8,
    pub max_proactive_copies: u32,
    pub loss_ewma_alpha: f64,
    /// RTT assumed before the first feedback echo arrives.
    pub initial_rtt_ms: f64,
    /// Feedback is emitted after this many data segments...
    pub feedback_every_segments: u32,
    /// ...or this long after the first unreported one, whichever comes first.
    pub feedback_interval_ms: u64,
    /// How long a hole may wait for late copies before an unrecoverable group
    /// is given up.
    pub reorder_grace_ms: u64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            bottleneck_rate_bps: 10_000_000,
            target_residual_loss: 1e-3,
            retransmission_timeout_ms: 50,
            default_deadline_ms: None,
            coding_group_k: 4,
            max_proactive_copies: 4,
            loss_ewma_alpha: 0.1,
            initial_rtt_ms: 10.0,
            feedback_every_segments: 16,
            feedback_interval_ms: 25,
            reorder_grace_ms: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportConfigError {
    #[error("bottleneck_rate_bps must be > 0")]
    Rate,
    #[error("target_residual_loss must be in (0, 1), got {0}")]
    Target(f64),
    #[error("retransmission_timeout_ms must be > 0")]
    Timeout,
    #[error("coding_group_k must be in 1..=254")]
    GroupSize,
    #[error("max_proactive_copies must be >= 1")]
    Copies,
    #[error("loss_ewma_alpha must be in (0, 1], got {0}")]
    Alpha(f64),
    #[error("initial_rtt_ms must be finite and > 0, got {0}")]
    InitialRtt(f64),
    #[error("feedback_every_segments and feedback_interval_ms must be > 0")]
    Feedback,
    #[error("default_deadline_ms must be in 1..=65534")]
    DefaultDeadline,
}

impl TransportConfig {
    pub fn validate(&self) -> Result<(), TransportConfigError> {
        if self.bottleneck_rate_bps == 0 {
            return Err(TransportConfigError::Rate);
        }
        if !(self.target_residual_loss > 0.0 && self.target_residual_loss < 1.0) {
            return Err(TransportConfigError::Target(self.target_residual_loss));
        }
        if self.retransmission_timeout_ms == 0 {
            return Err(TransportConfigError::Timeout);
        }
        if self.coding_group_k == 0 || self.coding_group_k == 255 {
            return Err(TransportConfigError::GroupSize);
        }
        if self.max_proactive_copies == 0 {
            return Err(TransportConfigError::Copies);
        }
        if !(self.loss_ewma_alpha > 0.0 && self.loss_ewma_alpha <= 1.0) {
            return Err(TransportConfigError::Alpha(self.loss_ewma_alpha));
        }
        if !(self.initial_rtt_ms.is_finite() && self.initial_rtt_ms > 0.0) {
            return Err(TransportConfigError::InitialRtt(self.initial_rtt_ms));
        }
        if self.feedback_every_segments == 0 || self.feedback_interval_ms == 0 {
            return Err(TransportConfigError::Feedback);
        }
        if matches!(self.default_deadline_ms, Some(0) | Some(65_535..)) {
            return Err(TransportConfigError::DefaultDeadline);
        }
        Ok(())
    }

    pub fn default_deadline(&self) -> Deadline {
        self.default_deadline_ms.into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RedundancyPlan {
    pub proactive_copies: u32,
    pub use_group_parity: bool,
    pub allow_reactive_retx: bool,
    /// Probability that every copy of a segment is lost.
    pub predicted_residual: f64,
}

/// Chooses between reactive retransmission and proactive repetition.
///
/// If one retransmission round fits in the deadline (or there is none), send
/// once and let ARQ repair losses, adding group parity when the channel is
/// lossy. Otherwise repeat each segment just enough times that
/// `loss^copies <= target`, capped at `max_proactive_copies`.
pub fn select_redundancy(
    loss_estimate: f64,
    cfg: &TransportConfig,
    rtt_estimate_ms: f64,
    deadline: Deadline,
) -> RedundancyPlan {
    let loss = loss_estimate.clamp(0.0, 1.0);
    let retx_fits = match deadline.millis() {
        None => true,
        Some(d) => rtt_estimate_ms + cfg.retransmission_timeout_ms as f64 <= d as f64,
    };
    if retx_fits {
        return RedundancyPlan {
            proactive_copies: 1,
            use_group_parity: loss > 0.0,
            allow_reactive_retx: true,
            predicted_residual: loss,
        };
    }
    // relative slack so that 0.1^3 counts as meeting a 1e-3 target
    let target = cfg.target_residual_loss * (1.0 + 1e-9);
    let mut copies = 1;
    while copies < cfg.max_proactive_copies && loss.powi(copies as i32) > target {
        copies += 1;
    }
    RedundancyPlan {
        proactive_copies: copies,
        use_group_parity: false,
        allow_reactive_retx: false,
        predicted_residual: loss.powi(copies as i32),
    }
}

/// Probability that a data segment is lost for good when each of the `k`
/// data segments is sent `copies` times and, optionally, one parity segment
/// is added to the group.
pub fn group_residual_loss(loss: f64, copies: u32, k: u32, with_parity: bool) -> f64 {
    let q = loss.powi(copies as i32);
    if !with_parity || k == 0 {
        return q;
    }
    // recoverable iff the other k-1 data segments and the parity all arrived
    q * (1.0 - (1.0 - q).powi(k as i32 - 1) * (1.0 - loss))
}

/// Time the bottleneck needs to carry `wire_size_bits`.
pub fn pacing_gap(cfg: &TransportConfig, wire_size_bits: u64) -> Duration {
    let nanos = (wire_size_bits as u128 * 1_000_000_000).div_ceil(cfg.bottleneck_rate_bps as u128);
    Duration::from_nanos(nanos as u64)
}
