use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::controller::ControllerConfig;
use crate::fabric::{NodeId, Topology, TopologyDocument, DEFAULT_MTU_PAYLOAD};

const DEFAULT_SCENARIO: &str = include_str!("../../scenarios/default.json");

/// Smallest and largest file of the default manifest.
pub const DEFAULT_MIN_SIZE: u64 = 2 * 1024;
pub const DEFAULT_MAX_SIZE: u64 = 6 * 1024 * 1024;
pub const DEFAULT_FILE_COUNT: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TopologyRef {
    Inline(TopologyDocument),
    /// Relative paths resolve against the scenario file's directory.
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSpec {
    pub name: String,
    pub size: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestSpec {
    pub at_ms: u64,
    pub client: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    pub proxy: String,
    pub caches: Vec<String>,
    pub origin: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub mtu: usize,
    pub origin_port: u16,
    pub cache_port: u16,
    pub cache_capacity_bytes: u64,
    pub index_name: String,
    /// `listen` is ignored; the harness binds an ephemeral port.
    pub controller: ControllerConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            mtu: DEFAULT_MTU_PAYLOAD,
            origin_port: 80,
            cache_port: 8080,
            cache_capacity_bytes: 1 << 30,
            index_name: "index.html".into(),
            controller: ControllerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Seeds the TCP initial sequence numbers.
    #[serde(default)]
    pub seed: u64,
    pub topology: TopologyRef,
    pub roles: Roles,
    #[serde(default = "default_manifest")]
    pub files: Vec<FileSpec>,
    pub requests: Vec<RequestSpec>,
    #[serde(default)]
    pub config: ScenarioConfig,
}

/// Twelve files log-spaced from 2 KiB to 6 MiB.
pub fn default_manifest() -> Vec<FileSpec> {
    let ratio = DEFAULT_MAX_SIZE as f64 / DEFAULT_MIN_SIZE as f64;
    let last = (DEFAULT_FILE_COUNT - 1) as f64;
    (0..DEFAULT_FILE_COUNT)
        .map(|i| FileSpec {
            name: format!("file{:02}.bin", i + 1),
            size: (DEFAULT_MIN_SIZE as f64 * ratio.powf(i as f64 / last)).round() as u64,
            seed: i as u64 + 1,
        })
        .collect()
}

impl Scenario {
    /// The shipped two-pass desk experiment.
    pub fn default_scenario() -> Scenario {
        Scenario::from_json(DEFAULT_SCENARIO, None).expect("shipped scenario is valid")
    }

    pub fn from_json(json: &str, base_dir: Option<&Path>) -> Result<Scenario, HarnessError> {
        let mut s: Scenario =
            serde_json::from_str(json).map_err(|e| HarnessError::Invalid(e.to_string()))?;
        if let (TopologyRef::Path(p), Some(base)) = (&s.topology, base_dir) {
            if p.is_relative() {
                s.topology = TopologyRef::Path(base.join(p));
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Scenario, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Invalid(format!("{}: {e}", path.display())))?;
        Scenario::from_json(&text, path.parent())
    }

    pub fn topology(&self) -> Result<Topology, HarnessError> {
        let doc = match &self.topology {
            TopologyRef::Inline(doc) => doc.clone(),
            TopologyRef::Path(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| HarnessError::Invalid(format!("topology {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| HarnessError::Invalid(format!("topology: {e}")))?
            }
        };
        Ok(Topology::from_document(&doc)?)
    }

    pub fn file(&self, name: &str) -> Option<&FileSpec> {
        self.files.iter().find(|f| f.name == name)
    }

    /// Requests in execution order: by start time, script order on ties.
    pub fn ordered_requests(&self) -> Vec<(usize, &RequestSpec)> {
        let mut v: Vec<(usize, &RequestSpec)> = self.requests.iter().enumerate().collect();
        v.sort_by_key(|(i, r)| (r.at_ms, *i));
        v
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        let topology = self.topology()?;

        let mut names = BTreeSet::new();
        for f in &self.files {
            if f.name.is_empty() || f.name.starts_with('/') {
                return bad(format!("invalid file name '{}'", f.name));
            }
            if f.size == 0 {
                return bad(format!("file '{}' has size 0", f.name));
            }
            if !names.insert(f.name.as_str()) {
                return bad(format!("file '{}' listed twice", f.name));
            }
        }

        let host = |id: &str, role: &str| -> Result<(), HarnessError> {
            if topology.host(&NodeId::new(id)).is_none() {
                return Err(HarnessError::Invalid(format!(
                    "{role} '{id}' is not a host in the topology"
                )));
            }
            Ok(())
        };
        host(&self.roles.proxy, "proxy")?;
        host(&self.roles.origin, "origin")?;
        if self.roles.caches.is_empty() {
            return bad("at least one cache is required".into());
        }
        let mut taken = BTreeSet::from([self.roles.proxy.as_str(), self.roles.origin.as_str()]);
        if taken.len() < 2 {
            return bad("proxy and origin must be different hosts".into());
        }
        for c in &self.roles.caches {
            host(c, "cache")?;
            if !taken.insert(c.as_str()) {
                return bad(format!("host '{c}' has more than one role"));
            }
        }

        for (i, r) in self.requests.iter().enumerate() {
            host(&r.client, "client")?;
            if taken.contains(r.client.as_str()) {
                return bad(format!(
                    "request {i}: client '{}' also has a server role",
                    r.client
                ));
            }
            if !names.contains(r.file.as_str()) {
                return bad(format!(
                    "request {i}: file '{}' is not in the manifest",
                    r.file
                ));
            }
        }

        let c = &self.config;
        if c.mtu < 64 {
            return bad(format!("mtu {} is too small", c.mtu));
        }
        if c.origin_port == 0 || c.cache_port == 0 {
            return bad("ports must be non-zero".into());
        }
        if c.cache_capacity_bytes == 0 {
            return bad("cache capacity must be positive".into());
        }
        Ok(())
    }
}
