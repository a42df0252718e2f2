//! Control plane with a content-management module.
//!
//! The controller keeps two dictionaries: the cache dictionary (file name →
//! cache holding it) and the request dictionary (origin server IP → file
//! name awaiting caching). When the proxy reports the metadata of a missed
//! request, the controller picks a cache, computes where the origin→proxy
//! response flow should be forked, pushes the fork rules into the fabric
//! and records the pending name for the cache to claim.
//!
//! Storage elements register, heartbeat, report usage and tear down their
//! sessions here as well. All state is owned by one [`Controller`] value;
//! concurrent callers share it through [`SharedController`].

mod api;
mod client;
mod config;
mod fork;
mod types;

use std::collections::{BTreeMap, HashMap};
use std::net::Ipv4Addr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use log::{debug, info};
use serde::Serialize;
use thiserror::Error;

pub use api::ControllerServer;
pub use client::{ClientError, ControllerClient, HttpControllerClient, StatsReport};
pub use config::ControllerConfig;
pub use fork::{compute_fork_point, ForkPoint};
pub use types::{
    CacheLocation, ContentMetadata, MetadataOutcome, SessionId, SessionState, StorageCapability,
    StorageOp, StorageSession,
};

use crate::clock::{Clock, SystemClock};
use crate::fabric::{Action, FabricError, FlowMatch, FlowRule, NodeId, RuleId, SharedFabric};
use crate::flow::{FlowKey, Protocol};

/// Priority of destination-based routes.
pub const ROUTE_PRIORITY: u32 = 10;
/// Priority of the static client↔proxy NAT rules.
pub const NAT_PRIORITY: u32 = 100;
/// Priority of per-flow fork rules.
pub const FORK_PRIORITY: u32 = 200;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ControllerError {
    #[error("invalid content metadata: {0}")]
    InvalidMetadata(String),
    #[error("invalid storage capability: {0}")]
    InvalidCapability(String),
    #[error("storage element {0} is not a host in the topology")]
    UnknownElement(Ipv4Addr),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session {id} is {state}")]
    SessionNotActive { id: SessionId, state: SessionState },
    #[error("reported usage {used} exceeds capacity {capacity}")]
    CapacityExceeded { used: u64, capacity: u64 },
    #[error("no provisional cache entry for '{0}'")]
    NoProvisionalEntry(String),
    #[error("'{file}' is assigned to session {expected}, not {got}")]
    WrongSession {
        file: String,
        expected: SessionId,
        got: SessionId,
    },
    #[error("no fabric attached to the controller")]
    NoFabric,
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("config: {0}")]
    Config(String),
}

/// Decides whether a missed request should be cached.
pub type CachingPolicy = Arc<dyn Fn(&ContentMetadata) -> bool + Send + Sync>;

/// Receives a heads-up when a flow is about to be mirrored to a cache.
pub trait CacheNotifier: Send + Sync {
    fn expect_content(&self, meta: &ContentMetadata, cache: CacheLocation, mirrored: FlowKey);
}

pub type SharedController = Arc<Mutex<Controller>>;

#[derive(Debug, Clone, PartialEq, Eq)]
enum EntryStatus {
    Provisional {
        created_at: Duration,
        origin_ip: Ipv4Addr,
        fork_rules: Vec<(NodeId, RuleId)>,
    },
    Authoritative,
}

#[derive(Debug, Clone)]
struct CacheRecord {
    location: CacheLocation,
    session: SessionId,
    status: EntryStatus,
}

#[derive(Debug, Clone)]
struct PendingRequest {
    file_name: String,
    inserted_at: Duration,
}

/// Diagnostic snapshot served on `GET /admin/state`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdminState {
    pub now_ms: u64,
    pub cache_dictionary: BTreeMap<String, CacheEntryView>,
    pub request_dictionary: BTreeMap<Ipv4Addr, PendingView>,
    pub sessions: Vec<StorageSession>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheEntryView {
    pub ip: Ipv4Addr,
    pub port: u16,
    pub session_id: SessionId,
    pub authoritative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PendingView {
    pub file_name: String,
    pub age_ms: u64,
}

pub struct Controller {
    config: ControllerConfig,
    clock: Arc<dyn Clock>,
    fabric: Option<SharedFabric>,
    cache_dictionary: HashMap<String, CacheRecord>,
    request_dictionary: HashMap<Ipv4Addr, PendingRequest>,
    sessions: BTreeMap<SessionId, StorageSession>,
    next_session: u64,
    policy: CachingPolicy,
    notifier: Option<Arc<dyn CacheNotifier>>,
}

impl std::fmt::Debug for Controller {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Controller")
            .field("config", &self.config)
            .field("cache_entries", &self.cache_dictionary.len())
            .field("pending", &self.request_dictionary.len())
            .field("sessions", &self.sessions.len())
            .finish_non_exhaustive()
    }
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Self {
        let cache_everything = config.cache_everything;
        Controller {
            config,
            clock: Arc::new(SystemClock::new()),
            fabric: None,
            cache_dictionary: HashMap::new(),
            request_dictionary: HashMap::new(),
            sessions: BTreeMap::new(),
            next_session: 1,
            policy: Arc::new(move |_| cache_everything),
            notifier: None,
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_fabric(mut self, fabric: SharedFabric) -> Self {
        self.fabric = Some(fabric);
        self
    }

    pub fn with_policy(mut self, policy: CachingPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_notifier(mut self, notifier: Arc<dyn CacheNotifier>) -> Self {
        self.notifier = Some(notifier);
        self
    }

    pub fn into_shared(self) -> SharedController {
        Arc::new(Mutex::new(self))
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    fn fabric(&self) -> Result<MutexGuard<'_, crate::fabric::Fabric>, ControllerError> {
        let fabric = self.fabric.as_ref().ok_or(ControllerError::NoFabric)?;
        Ok(fabric.lock().expect("fabric lock poisoned"))
    }

    // ---- storage primitives ----

    pub fn register_storage(
        &mut self,
        capability: StorageCapability,
    ) -> Result<SessionId, ControllerError> {
        if capability.capacity_bytes == 0 {
            return Err(ControllerError::InvalidCapability(
                "capacity_bytes must be > 0".into(),
            ));
        }
        if capability.port == 0 {
            return Err(ControllerError::InvalidCapability(
                "port must be in 1..65535".into(),
            ));
        }
        if capability.ops.is_empty() {
            return Err(ControllerError::InvalidCapability(
                "no supported operations".into(),
            ));
        }
        if let Some(fabric) = &self.fabric {
            let fabric = fabric.lock().expect("fabric lock poisoned");
            if fabric.topology().host_by_ip(capability.ip).is_none() {
                return Err(ControllerError::UnknownElement(capability.ip));
            }
        }
        self.sweep();

        let previous: Vec<SessionId> = self
            .sessions
            .values()
            .filter(|s| s.is_active() && s.capability.ip == capability.ip)
            .map(|s| s.session_id)
            .collect();
        for id in previous {
            info!("closing superseded storage session {id}");
            self.end_session(id, SessionState::Closed);
        }

        let id = SessionId(self.next_session);
        self.next_session += 1;
        let now = self.now_ms();
        info!(
            "storage element {}:{} registered as session {id} ({} bytes)",
            capability.ip, capability.port, capability.capacity_bytes
        );
        self.sessions.insert(
            id,
            StorageSession {
                session_id: id,
                capability,
                last_heartbeat_ms: now,
                used_bytes: 0,
                object_count: 0,
                state: SessionState::Active,
            },
        );
        Ok(id)
    }

    pub fn heartbeat(&mut self, id: SessionId) -> Result<(), ControllerError> {
        self.sweep();
        let now = self.now_ms();
        let session = self.active_session_mut(id)?;
        session.last_heartbeat_ms = now;
        Ok(())
    }

    pub fn report_stats(
        &mut self,
        id: SessionId,
        used_bytes: u64,
        object_count: u64,
        evicted: &[String],
    ) -> Result<(), ControllerError> {
        self.sweep();
        let session = self.active_session_mut(id)?;
        if used_bytes > session.capability.capacity_bytes {
            return Err(ControllerError::CapacityExceeded {
                used: used_bytes,
                capacity: session.capability.capacity_bytes,
            });
        }
        session.used_bytes = used_bytes;
        session.object_count = object_count;
        for name in evicted {
            if self
                .cache_dictionary
                .get(name)
                .is_some_and(|r| r.session == id)
            {
                debug!("'{name}' evicted from session {id}");
                self.remove_entry(name);
            }
        }
        Ok(())
    }

    pub fn deregister_storage(&mut self, id: SessionId) -> Result<(), ControllerError> {
        self.sweep();
        self.active_session_mut(id)?;
        self.end_session(id, SessionState::Closed);
        Ok(())
    }

    pub fn session(&self, id: SessionId) -> Option<&StorageSession> {
        self.sessions.get(&id)
    }

    fn active_session_mut(
        &mut self,
        id: SessionId,
    ) -> Result<&mut StorageSession, ControllerError> {
        let session = self
            .sessions
            .get_mut(&id)
            .ok_or(ControllerError::UnknownSession(id))?;
        if !session.is_active() {
            return Err(ControllerError::SessionNotActive {
                id,
                state: session.state,
            });
        }
        Ok(session)
    }

    fn end_session(&mut self, id: SessionId, state: SessionState) {
        if let Some(s) = self.sessions.get_mut(&id) {
            s.state = state;
        }
        let names: Vec<String> = self
            .cache_dictionary
            .iter()
            .filter(|(_, r)| r.session == id)
            .map(|(n, _)| n.clone())
            .collect();
        for name in names {
            self.remove_entry(&name);
        }
    }

    // ---- content primitives ----

    /// Cache holding `file_name`, if its entry is confirmed and its
    /// session is live. Never mutates state.
    pub fn lookup_content(&self, file_name: &str) -> Option<CacheLocation> {
        let record = self.cache_dictionary.get(file_name)?;
        if record.status != EntryStatus::Authoritative {
            return None;
        }
        let session = self.sessions.get(&record.session)?;
        (session.is_active() && !self.is_overdue(session)).then_some(record.location)
    }

    pub fn report_metadata(
        &mut self,
        meta: &ContentMetadata,
    ) -> Result<MetadataOutcome, ControllerError> {
        if meta.file_name.is_empty() {
            return Err(ControllerError::InvalidMetadata("empty file name".into()));
        }
        if meta.dst_port == 0 || meta.src_port == 0 {
            return Err(ControllerError::InvalidMetadata(
                "ports must be in 1..65535".into(),
            ));
        }
        self.sweep();

        if self.cache_dictionary.contains_key(&meta.file_name) {
            return Ok(MetadataOutcome::AlreadyCached);
        }
        if self.request_dictionary.contains_key(&meta.dst_ip) {
            debug!(
                "origin {} already has a pending fetch; '{}' not cached",
                meta.dst_ip, meta.file_name
            );
            return Ok(MetadataOutcome::OriginBusy);
        }
        if !(self.policy)(meta) {
            return Ok(MetadataOutcome::PolicyDeclined);
        }
        if !self.sessions.values().any(StorageSession::is_cache_target) {
            return Ok(MetadataOutcome::NoStorage);
        }
        let Some(fabric) = self.fabric.clone() else {
            return Ok(MetadataOutcome::Unroutable);
        };
        let mut fabric = fabric.lock().expect("fabric lock poisoned");
        let topology = fabric.topology();
        let (Some(origin), Some(proxy)) = (
            topology.host_by_ip(meta.dst_ip).cloned(),
            topology.host_by_ip(meta.src_ip).cloned(),
        ) else {
            return Ok(MetadataOutcome::Unroutable);
        };

        // Rank caches by distance from their own fork point, then by ip.
        let mut candidates = Vec::new();
        for session in self.sessions.values().filter(|s| s.is_cache_target()) {
            let Some(cache_host) = topology.host_by_ip(session.capability.ip) else {
                continue;
            };
            let fork = compute_fork_point(topology, &origin, &proxy, cache_host)?;
            candidates.push((
                fork.cache_latency,
                session.capability.ip,
                session.session_id,
                fork,
            ));
        }
        candidates.sort_by_key(|c| (c.0, c.1));
        let Some((_, _, session_id, fork)) = candidates.into_iter().next() else {
            return Ok(MetadataOutcome::Unroutable);
        };
        let location = self.sessions[&session_id].capability.location();

        let response = meta.response_flow();
        let mirrored = FlowKey {
            dst_ip: location.ip,
            dst_port: location.port,
            ..response
        };
        let fork_at = fork
            .primary_path
            .iter()
            .position(|n| *n == fork.switch)
            .expect("fork switch lies on the primary path");
        let toward_proxy = fork.primary_path[fork_at + 1].clone();

        let mut installed = Vec::new();
        let fork_rule = FlowRule::new(
            FlowMatch::exact(&response, Protocol::Tcp),
            vec![
                Action::Forward {
                    next_hop: toward_proxy,
                },
                Action::RewriteDst {
                    ip: location.ip,
                    port: location.port,
                },
                Action::Duplicate {
                    next_hop: fork.cache_path[1].clone(),
                },
            ],
            FORK_PRIORITY,
        );
        installed.push((
            fork.switch.clone(),
            fabric.install_rule(&fork.switch, fork_rule)?,
        ));
        // Carry the rewritten copy from the fork switch to the cache.
        for hop in fork.cache_path.windows(2).skip(1) {
            let rule = FlowRule::new(
                FlowMatch::exact(&mirrored, Protocol::Tcp),
                vec![Action::Forward {
                    next_hop: hop[1].clone(),
                }],
                FORK_PRIORITY,
            );
            installed.push((hop[0].clone(), fabric.install_rule(&hop[0], rule)?));
        }
        drop(fabric);

        let now = self.clock.now();
        self.request_dictionary.insert(
            meta.dst_ip,
            PendingRequest {
                file_name: meta.file_name.clone(),
                inserted_at: now,
            },
        );
        self.cache_dictionary.insert(
            meta.file_name.clone(),
            CacheRecord {
                location,
                session: session_id,
                status: EntryStatus::Provisional {
                    created_at: now,
                    origin_ip: meta.dst_ip,
                    fork_rules: installed,
                },
            },
        );
        info!(
            "forking {} at {} toward cache {}:{} for '{}'",
            response, fork.switch, location.ip, location.port, meta.file_name
        );
        if let Some(n) = &self.notifier {
            n.expect_content(meta, location, mirrored);
        }
        Ok(MetadataOutcome::Forked {
            switch: fork.switch,
            session: session_id,
            cache: location,
        })
    }

    /// Claims the pending file name for responses coming from `source_ip`.
    /// A pending entry is handed out at most once.
    pub fn cache_query(&mut self, source_ip: Ipv4Addr) -> Option<String> {
        self.sweep();
        self.request_dictionary
            .remove(&source_ip)
            .map(|p| p.file_name)
    }

    pub fn confirm_stored(
        &mut self,
        id: SessionId,
        file_name: &str,
    ) -> Result<(), ControllerError> {
        self.sweep();
        self.active_session_mut(id)?;
        let record = self
            .cache_dictionary
            .get_mut(file_name)
            .ok_or_else(|| ControllerError::NoProvisionalEntry(file_name.to_string()))?;
        if record.session != id {
            return Err(ControllerError::WrongSession {
                file: file_name.to_string(),
                expected: record.session,
                got: id,
            });
        }
        let EntryStatus::Provisional { fork_rules, .. } =
            std::mem::replace(&mut record.status, EntryStatus::Authoritative)
        else {
            // Already confirmed.
            return Ok(());
        };
        self.remove_rules(&fork_rules);
        info!("'{file_name}' confirmed in session {id}");
        Ok(())
    }

    // ---- fabric programming ----

    /// Destination-based routes toward every host from every switch.
    pub fn install_base_routes(&mut self) -> Result<usize, ControllerError> {
        let mut fabric = self.fabric()?;
        let topology = fabric.topology().clone();
        let mut count = 0;
        for switch in topology.switches() {
            for (host, info) in topology.hosts() {
                let Some(next) = topology.next_hop(switch, host)? else {
                    continue;
                };
                let rule = FlowRule::new(
                    FlowMatch::default().dst_ip(info.ip),
                    vec![Action::Forward { next_hop: next }],
                    ROUTE_PRIORITY,
                );
                fabric.install_rule(switch, rule)?;
                count += 1;
            }
        }
        Ok(count)
    }

    /// Steers HTTP traffic from every other host on `client_switch` to
    /// `proxy_host` with the original destination intact, and carries the
    /// proxy's replies back to those hosts.
    pub fn install_nat_rules(
        &mut self,
        client_switch: &NodeId,
        proxy_host: &NodeId,
    ) -> Result<Vec<RuleId>, ControllerError> {
        let http_port = self.config.http_port;
        let mut fabric = self.fabric()?;
        let topology = fabric.topology().clone();
        if !topology.is_switch(client_switch) {
            return Err(FabricError::UnknownSwitch(client_switch.clone()).into());
        }
        if topology.host(proxy_host).is_none() {
            return Err(FabricError::UnknownHost(proxy_host.clone()).into());
        }
        let to_proxy = topology.shortest_path(client_switch, proxy_host)?;
        let mut ids = Vec::new();
        for client in topology
            .hosts_on(client_switch)
            .filter(|h| *h != proxy_host)
        {
            let client_ip = topology.host(client).unwrap().ip;
            for hop in to_proxy.windows(2) {
                let rule = FlowRule::new(
                    FlowMatch::default()
                        .src_ip(client_ip)
                        .dst_port(http_port)
                        .protocol(Protocol::Tcp),
                    vec![Action::forward(hop[1].clone())],
                    NAT_PRIORITY,
                );
                ids.push(fabric.install_rule(&hop[0], rule)?);
            }
            let back = topology.shortest_path(proxy_host, client)?;
            for hop in back.windows(2).skip(1) {
                let rule = FlowRule::new(
                    FlowMatch::default()
                        .dst_ip(client_ip)
                        .src_port(http_port)
                        .protocol(Protocol::Tcp),
                    vec![Action::forward(hop[1].clone())],
                    NAT_PRIORITY,
                );
                ids.push(fabric.install_rule(&hop[0], rule)?);
            }
        }
        Ok(ids)
    }

    pub fn compute_fork_point(
        &self,
        origin: &NodeId,
        proxy: &NodeId,
        cache: &NodeId,
    ) -> Result<NodeId, ControllerError> {
        let fabric = self.fabric()?;
        Ok(compute_fork_point(fabric.topology(), origin, proxy, cache)?.switch)
    }

    // ---- housekeeping ----

    /// Expires silent sessions and stale pending entries.
    pub fn sweep(&mut self) {
        let now = self.clock.now();
        let overdue: Vec<SessionId> = self
            .sessions
            .values()
            .filter(|s| s.is_active() && self.is_overdue(s))
            .map(|s| s.session_id)
            .collect();
        for id in overdue {
            info!("storage session {id} expired");
            self.end_session(id, SessionState::Expired);
        }

        let ttl = self.config.pending_ttl();
        let stale: Vec<String> = self
            .cache_dictionary
            .iter()
            .filter(|(_, r)| {
                matches!(r.status, EntryStatus::Provisional { created_at, .. } if now.saturating_sub(created_at) >= ttl)
            })
            .map(|(n, _)| n.clone())
            .collect();
        for name in stale {
            debug!("provisional entry '{name}' timed out");
            self.remove_entry(&name);
        }
        self.request_dictionary
            .retain(|_, p| now.saturating_sub(p.inserted_at) < ttl);
    }

    fn is_overdue(&self, session: &StorageSession) -> bool {
        let silent = self
            .clock
            .now()
            .saturating_sub(Duration::from_millis(session.last_heartbeat_ms));
        silent >= self.config.session_timeout()
    }

    fn remove_entry(&mut self, file_name: &str) {
        let Some(record) = self.cache_dictionary.remove(file_name) else {
            return;
        };
        if let EntryStatus::Provisional {
            origin_ip,
            fork_rules,
            ..
        } = record.status
        {
            self.remove_rules(&fork_rules);
            if self
                .request_dictionary
                .get(&origin_ip)
                .is_some_and(|p| p.file_name == file_name)
            {
                self.request_dictionary.remove(&origin_ip);
            }
        }
    }

    fn remove_rules(&self, rules: &[(NodeId, RuleId)]) {
        let Some(fabric) = &self.fabric else { return };
        let mut fabric = fabric.lock().expect("fabric lock poisoned");
        for (switch, id) in rules {
            // Already gone is fine.
            let _ = fabric.remove_rule(switch, *id);
        }
    }

    fn now_ms(&self) -> u64 {
        self.clock.now().as_millis() as u64
    }

    pub fn admin_state(&mut self) -> AdminState {
        self.sweep();
        let now = self.clock.now();
        AdminState {
            now_ms: now.as_millis() as u64,
            cache_dictionary: self
                .cache_dictionary
                .iter()
                .map(|(n, r)| {
                    (
                        n.clone(),
                        CacheEntryView {
                            ip: r.location.ip,
                            port: r.location.port,
                            session_id: r.session,
                            authoritative: r.status == EntryStatus::Authoritative,
                        },
                    )
                })
                .collect(),
            request_dictionary: self
                .request_dictionary
                .iter()
                .map(|(ip, p)| {
                    (
                        *ip,
                        PendingView {
                            file_name: p.file_name.clone(),
                            age_ms: now.saturating_sub(p.inserted_at).as_millis() as u64,
                        },
                    )
                })
                .collect(),
            sessions: self.sessions.values().cloned().collect(),
        }
    }
}

#[cfg(test)]
mod tests;
