//! Node configuration files.
//!
//! ```toml
//! node_id = "client-1"
//! listen = "127.0.0.1:9101"
//! coordinator = "127.0.0.1:9100"
//! plugin_dir = "plugins"
//!
//! [[sensors]]
//! name = "walk"
//! history_size = 60
//! source = { plugin = "random_walk", params = { seed = 7 } }
//! output_schema = [{ name = "value", kind = "numeric" }]
//!
//! [[subscriptions]]
//! sensor = "walk"
//! subscriber = "127.0.0.1:9100"
//! mode = "push"
//! persistent_delivery = true
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::VirtualSensorConfig;
use crate::wire::frame::{DeliveryMode, SubscribeRequest};
use crate::wire::text::{self, TextError};
use crate::wire::DEFAULT_PORT;

pub const DEFAULT_QUERY_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_QUEUE_BOUND: usize = 1024;
pub const HEARTBEAT_MS: u64 = 10_000;
pub const REGISTRATION_REFRESH_MS: u64 = 10_000;

fn default_listen() -> String {
    format!("127.0.0.1:{DEFAULT_PORT}")
}

fn default_query_timeout() -> u64 {
    DEFAULT_QUERY_TIMEOUT_MS
}

fn default_queue_bound() -> usize {
    DEFAULT_QUEUE_BOUND
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub node_id: String,
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Address announced to peers; defaults to the bound address.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advertise: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinator: Option<String>,
    /// Directory scanned for `*.plugin` descriptors, relative to `base_dir`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plugin_dir: Option<PathBuf>,
    /// Enables the append-only spill log per sensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spill_dir: Option<PathBuf>,
    /// Every received delivery is appended here as CSV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivery_log: Option<PathBuf>,
    #[serde(default = "default_query_timeout")]
    pub query_timeout_ms: u64,
    #[serde(default = "default_queue_bound")]
    pub queue_bound: usize,
    #[serde(default)]
    pub sensors: Vec<VirtualSensorConfig>,
    /// Subscriptions this node opens on its own sensors at startup.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subscriptions: Vec<SubscribeRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregator: Option<AggregatorConfig>,
    /// Directory relative paths resolve against. Not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl NodeConfig {
    pub fn new(node_id: impl Into<String>) -> Self {
        NodeConfig {
            node_id: node_id.into(),
            listen: default_listen(),
            advertise: None,
            coordinator: None,
            plugin_dir: None,
            spill_dir: None,
            delivery_log: None,
            query_timeout_ms: DEFAULT_QUERY_TIMEOUT_MS,
            queue_bound: DEFAULT_QUEUE_BOUND,
            sensors: Vec::new(),
            subscriptions: Vec::new(),
            aggregator: None,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn parse(s: &str) -> Result<Self, TextError> {
        let mut cfg: NodeConfig = text::parse(s)?;
        cfg.base_dir = PathBuf::from(".");
        Ok(cfg)
    }

    pub fn encode(&self) -> Result<String, TextError> {
        text::encode(self)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let s = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut cfg = NodeConfig::parse(&s).map_err(|e| format!("{}: {e}", path.display()))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Which way an aggregator obtains data from its clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadMode {
    /// Each request stream issues `latest?n=1` once per interval.
    Pull,
    PersistentStream,
    Push,
}

impl LoadMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LoadMode::Pull => "pull",
            LoadMode::PersistentStream => "persistent_stream",
            LoadMode::Push => "push",
        }
    }

    pub fn delivery(self) -> Option<DeliveryMode> {
        match self {
            LoadMode::Pull => None,
            LoadMode::PersistentStream => Some(DeliveryMode::PersistentStream),
            LoadMode::Push => Some(DeliveryMode::Push),
        }
    }
}

fn default_interval_ms() -> u64 {
    1000
}

/// Turns a node into the experiment's server side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorConfig {
    pub mode: LoadMode,
    pub requests_per_client: usize,
    pub expected_clients: usize,
    pub duration_s: u64,
    #[serde(default = "default_interval_ms")]
    pub interval_ms: u64,
    pub event_log: PathBuf,
    /// Caps the aggregator's work rate; unset means unconstrained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub throttle_ops_per_s: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_example_parses() {
        let doc = r#"
node_id = "client-1"
listen = "127.0.0.1:9101"
coordinator = "127.0.0.1:9100"
plugin_dir = "plugins"

[[sensors]]
name = "walk"
history_size = 60
source = { plugin = "random_walk", params = { seed = 7 } }
output_schema = [{ name = "value", kind = "numeric" }]

[[subscriptions]]
sensor = "walk"
subscriber = "127.0.0.1:9100"
mode = "push"
persistent_delivery = true
"#;
        let cfg = NodeConfig::parse(doc).unwrap();
        assert_eq!(cfg.sensors.len(), 1);
        assert_eq!(cfg.query_timeout_ms, 30_000);
        assert_eq!(cfg.subscriptions[0].mode, DeliveryMode::Push);
        let again = NodeConfig::parse(&cfg.encode().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn aggregator_section() {
        let doc = r#"
node_id = "agg"
[aggregator]
mode = "persistent_stream"
requests_per_client = 30
expected_clients = 3
duration_s = 60
event_log = "events.csv"
throttle_ops_per_s = 120.0
"#;
        let cfg = NodeConfig::parse(doc).unwrap();
        let a = cfg.aggregator.unwrap();
        assert_eq!(a.mode, LoadMode::PersistentStream);
        assert_eq!(a.interval_ms, 1000);
        assert_eq!(a.throttle_ops_per_s, Some(120.0));
        assert_eq!(cfg.listen, "127.0.0.1:9100");
    }
}
