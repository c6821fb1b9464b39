use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bridge::BridgeConfig;
use crate::chansim::ChannelConfig;
use crate::controller::WorkloadConfig;
use crate::drone::DroneConfig;
use crate::serial::WireConfig;
use crate::transport::{ExpiryMode, TransportConfig};

/// Which link carries CRTP between controller and drone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    /// Transport over the channel to the bridge, then serial to the drone.
    #[default]
    Prrt,
    /// The channel reaches the drone directly; no transport, bridge or serial.
    Radio,
}

impl PathKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PathKind::Prrt => "prrt",
            PathKind::Radio => "radio",
        }
    }
}

/// One experiment. Both channel directions share `channel`; the seeds inside
/// `channel` and `wire` are replaced by streams derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub path: PathKind,
    #[serde(default)]
    pub expiry_mode: ExpiryMode,
    /// Virtual-time cap on the run.
    #[serde(default = "default_max_duration_ms")]
    pub max_duration_ms: u64,
    #[serde(default)]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub wire: WireConfig,
    #[serde(default)]
    pub bridge: BridgeConfig,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default)]
    pub workload: WorkloadConfig,
    #[serde(default)]
    pub drone: DroneConfig,
}

fn default_max_duration_ms() -> u64 {
    3_600_000
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{origin}: {source}")]
    Parse { origin: String, source: Box<toml::de::Error> },
    #[error("{field}: {message}")]
    Invalid { field: String, message: String },
    #[error("unknown bundled scenario {0:?}; expected one of a-radio, b-python, c-rust")]
    UnknownBundled(String),
}

const BUNDLED: [(&str, &str); 3] = [
    ("a-radio", include_str!("../../../../scenarios/a-radio.toml")),
    ("b-python", include_str!("../../../../scenarios/b-python.toml")),
    ("c-rust", include_str!("../../../../scenarios/c-rust.toml")),
];

/// Seeds for the independent random streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSeeds {
    pub uplink_channel: u64,
    pub downlink_channel: u64,
    pub uplink_wire: u64,
    pub downlink_wire: u64,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            origin: origin.to_string(),
            source: Box::new(e),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// One of the checked-in scenarios, by name.
    pub fn bundled(name: &str) -> Result<Self, ConfigError> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ConfigError::UnknownBundled(name.to_string()))?;
        Self::from_toml(text, name)
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn check<E: std::fmt::Display>(section: &str, r: Result<(), E>) -> Result<(), ConfigError> {
            r.map_err(|e| {
                let message = e.to_string();
                // messages lead with the offending field name
                let field = message.split_whitespace().next().unwrap_or_default();
                let field = if field.chars().all(|c| c.is_ascii_lowercase() || c == '_') {
                    format!("{section}.{field}")
                } else {
                    section.to_string()
                };
                ConfigError::Invalid { field, message }
            })
        }
        if self.name.trim().is_empty() {
            return Err(ConfigError::Invalid {
                field: "name".into(),
                message: "name must be nonempty".into(),
            });
        }
        if self.max_duration_ms == 0 {
            return Err(ConfigError::Invalid {
                field: "max_duration_ms".into(),
                message: "max_duration_ms must be > 0".into(),
            });
        }
        check("channel", self.channel.validate())?;
        check("workload", self.workload.validate())?;
        check("drone", self.drone.validate())?;
        if self.path == PathKind::Prrt {
            check("wire", self.wire.validate())?;
            check("bridge", self.bridge.validate())?;
            check("transport", self.transport.validate())?;
        }
        Ok(())
    }

    pub fn stream_seeds(&self) -> StreamSeeds {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        StreamSeeds {
            uplink_channel: rng.next_u64(),
            downlink_channel: rng.next_u64(),
            uplink_wire: rng.next_u64(),
            downlink_wire: rng.next_u64(),
        }
    }

    pub fn run_id(&self) -> String {
        format!("{}-seed{}", self.name, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_scenarios_parse() {
        for name in ScenarioConfig::bundled_names() {
            let cfg = ScenarioConfig::bundled(name).unwrap();
            assert_eq!(cfg.name, name);
        }
        assert!(ScenarioConfig::bundled("d-missing").is_err());
    }

    #[test]
    fn invalid_field_is_named() {
        let err = ScenarioConfig::from_toml("name = \"x\"\n[bridge]\nqueue_capacity = 0\n", "t").unwrap_err();
        assert_eq!(err.to_string(), "bridge.queue_capacity: queue_capacity must be >= 1");
        let err = ScenarioConfig::from_toml("name = \"x\"\n[channel]\nloss_prob = 2.0\n", "t").unwrap_err();
        assert!(err.to_string().starts_with("channel.loss_prob:"));
        let err = ScenarioConfig::from_toml("name = \"\"\n", "t").unwrap_err();
        assert!(err.to_string().starts_with("name:"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ScenarioConfig::from_toml("name = \"x\"\n[bridge]\nqueue_cap = 3\n", "t").unwrap_err();
        assert!(err.to_string().contains("queue_cap"));
    }

    #[test]
    fn stream_seeds_differ_and_repeat() {
        let cfg = ScenarioConfig::bundled("c-rust").unwrap();
        let s = cfg.stream_seeds();
        assert_eq!(s, cfg.stream_seeds());
        assert_ne!(s.uplink_channel, s.downlink_channel);
    }
}
