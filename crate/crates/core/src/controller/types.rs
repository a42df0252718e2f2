use std::collections::BTreeSet;
use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};

use serde::{Deserialize, Serialize};

use crate::flow::FlowKey;

/// The five-tuple binding a file name to the proxy→origin TCP flow.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContentMetadata {
    pub file_name: String,
    pub dst_ip: Ipv4Addr,
    pub dst_port: u16,
    pub src_ip: Ipv4Addr,
    pub src_port: u16,
}

impl ContentMetadata {
    pub fn new(file_name: impl Into<String>, request_flow: FlowKey) -> Self {
        ContentMetadata {
            file_name: file_name.into(),
            dst_ip: request_flow.dst_ip,
            dst_port: request_flow.dst_port,
            src_ip: request_flow.src_ip,
            src_port: request_flow.src_port,
        }
    }

    pub fn is_valid(&self) -> bool {
        !self.file_name.is_empty() && self.dst_port != 0 && self.src_port != 0
    }

    /// The proxy→origin request direction.
    pub fn request_flow(&self) -> FlowKey {
        FlowKey {
            src_ip: self.src_ip,
            src_port: self.src_port,
            dst_ip: self.dst_ip,
            dst_port: self.dst_port,
        }
    }

    /// The origin→proxy response direction, the one that gets forked.
    pub fn response_flow(&self) -> FlowKey {
        self.request_flow().reversed()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageOp {
    Store,
    Serve,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageCapability {
    pub ip: Ipv4Addr,
    pub port: u16,
    pub capacity_bytes: u64,
    pub ops: BTreeSet<StorageOp>,
}

impl StorageCapability {
    pub fn new(addr: SocketAddrV4, capacity_bytes: u64) -> Self {
        StorageCapability {
            ip: *addr.ip(),
            port: addr.port(),
            capacity_bytes,
            ops: BTreeSet::from([StorageOp::Store, StorageOp::Serve]),
        }
    }

    pub fn location(&self) -> CacheLocation {
        CacheLocation {
            ip: self.ip,
            port: self.port,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u64);

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionState {
    Active,
    Expired,
    Closed,
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SessionState::Active => "active",
            SessionState::Expired => "expired",
            SessionState::Closed => "closed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageSession {
    pub session_id: SessionId,
    pub capability: StorageCapability,
    pub last_heartbeat_ms: u64,
    pub used_bytes: u64,
    pub object_count: u64,
    pub state: SessionState,
}

impl StorageSession {
    pub fn is_active(&self) -> bool {
        self.state == SessionState::Active
    }

    /// Active, able to store and serve, and not full.
    pub fn is_cache_target(&self) -> bool {
        self.is_active()
            && self.capability.ops.contains(&StorageOp::Store)
            && self.capability.ops.contains(&StorageOp::Serve)
            && self.used_bytes < self.capability.capacity_bytes
    }
}

/// Where a cached object can be fetched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheLocation {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl CacheLocation {
    pub fn addr(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.ip, self.port)
    }
}

impl From<SocketAddrV4> for CacheLocation {
    fn from(a: SocketAddrV4) -> Self {
        CacheLocation {
            ip: *a.ip(),
            port: a.port(),
        }
    }
}

/// What `report_metadata` did with a report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetadataOutcome {
    Forked {
        switch: crate::fabric::NodeId,
        session: SessionId,
        cache: CacheLocation,
    },
    AlreadyCached,
    /// Another fetch from the same origin is still pending.
    OriginBusy,
    PolicyDeclined,
    NoStorage,
    /// No fabric attached, or an endpoint is not a host in it.
    Unroutable,
}
