use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ControllerError;

/// Controller tunables. Loadable from a JSON or TOML file; every field is
/// optional in the file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// Address the HTTP/JSON API binds to.
    pub listen: String,
    /// Unclaimed requestDictionary entries and unconfirmed cache entries
    /// are dropped after this long.
    pub pending_ttl_ms: u64,
    pub heartbeat_interval_ms: u64,
    /// A session expires once this many heartbeat intervals pass silently.
    pub missed_heartbeats: u32,
    /// Default caching policy: cache everything not already cached.
    pub cache_everything: bool,
    /// Destination port treated as HTTP by the NAT rules.
    pub http_port: u16,
    pub api_workers: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            listen: "127.0.0.1:8181".to_string(),
            pending_ttl_ms: 30_000,
            heartbeat_interval_ms: 5_000,
            missed_heartbeats: 3,
            cache_everything: true,
            http_port: 80,
            api_workers: 4,
        }
    }
}

impl ControllerConfig {
    pub fn load(path: &Path) -> Result<Self, ControllerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ControllerError::Config(format!("{}: {e}", path.display())))?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml(&text),
            _ => Self::from_json(&text),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ControllerError> {
        serde_json::from_str(text).map_err(|e| ControllerError::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, ControllerError> {
        toml::from_str(text).map_err(|e| ControllerError::Config(e.to_string()))
    }

    pub fn pending_ttl(&self) -> Duration {
        Duration::from_millis(self.pending_ttl_ms)
    }

    pub fn session_timeout(&self) -> Duration {
        Duration::from_millis(self.heartbeat_interval_ms) * self.missed_heartbeats
    }
}
