//! Deterministic simulated switch fabric.
//!
//! Switches hold OpenFlow-style match/action tables. A packet injected at a
//! host walks hop by hop: at each switch the best matching rule's actions
//! run in order against a working copy of the header. `Forward` and
//! `Duplicate` emit the header as modified *so far*, so a rule such as
//! `[forward(p), rewrite-dst(c), duplicate(q)]` sends the original toward
//! `p` and a rewritten copy toward `q`.
//!
//! The fabric is single-owner; share it behind [`SharedFabric`].

mod rule;
mod topology;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::Ipv4Addr;
use std::sync::{Arc, Mutex};

use serde::{Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use rule::{Action, FlowMatch, FlowRule, FlowTable, InstalledRule, RuleId};
pub use topology::{
    load_topology, HostEntry, HostInfo, Latency, LinkEntry, NodeId, Topology, TopologyDocument,
};

use crate::flow::{FlowKey, Protocol};

pub const DEFAULT_MTU_PAYLOAD: usize = 1460;

pub type SharedFabric = Arc<Mutex<Fabric>>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FabricError {
    #[error("topology parse error: {0}")]
    Parse(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("unknown node '{0}'")]
    UnknownNode(NodeId),
    #[error("unknown switch '{0}'")]
    UnknownSwitch(NodeId),
    #[error("unknown host '{0}'")]
    UnknownHost(NodeId),
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("unknown rule {rule} on switch '{switch}'")]
    UnknownRule { switch: NodeId, rule: RuleId },
    #[error("payload of {len} bytes exceeds MTU payload size {mtu}")]
    PayloadTooLarge { len: usize, mtu: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize)]
pub struct TcpFlags {
    pub syn: bool,
    pub ack: bool,
    pub fin: bool,
    pub rst: bool,
}

impl TcpFlags {
    pub const ACK: TcpFlags = TcpFlags {
        syn: false,
        ack: true,
        fin: false,
        rst: false,
    };
    pub const FIN_ACK: TcpFlags = TcpFlags {
        syn: false,
        ack: true,
        fin: true,
        rst: false,
    };
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Packet {
    pub flow: FlowKey,
    pub protocol: Protocol,
    pub flags: TcpFlags,
    pub seq: u32,
    #[serde(serialize_with = "payload_digest")]
    pub payload: Vec<u8>,
}

fn payload_digest<S: Serializer>(payload: &[u8], s: S) -> Result<S::Ok, S::Error> {
    let digest = Sha256::digest(payload);
    s.serialize_str(&format!("{}:{}", payload.len(), hex::encode(digest)))
}

impl Packet {
    pub fn tcp(flow: FlowKey, seq: u32, flags: TcpFlags, payload: Vec<u8>) -> Self {
        Packet {
            flow,
            protocol: Protocol::Tcp,
            flags,
            seq,
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HopAction {
    /// Host put the packet on its access link.
    Emit {
        to: NodeId,
    },
    Forward {
        rule: RuleId,
        to: NodeId,
    },
    Duplicate {
        rule: RuleId,
        to: NodeId,
        copy: u32,
    },
    /// A forked copy met a duplicate action of a rule it was forked by.
    SkipDuplicate {
        rule: RuleId,
    },
    Rewrite {
        rule: RuleId,
        ip: Ipv4Addr,
        port: u16,
    },
    Drop {
        reason: DropReason,
    },
    Deliver,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "cause", rename_all = "snake_case")]
pub enum DropReason {
    NoMatchingRule,
    RuleDrop {
        rule: RuleId,
    },
    /// The packet already passed this (switch, rule) pair.
    Loop {
        rule: RuleId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Hop {
    pub node: NodeId,
    /// 0 for the original packet, then one number per emitted copy.
    pub copy: u32,
    pub action: HopAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Delivery {
    pub host: NodeId,
    pub copy: u32,
    pub latency: Latency,
    pub packet: Packet,
}

/// Everything that happened to one injected packet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DeliveryTrace {
    pub hops: Vec<Hop>,
    /// Sum of link latencies walked by the original packet.
    pub accumulated_latency: Latency,
    pub delivered_to: BTreeSet<NodeId>,
    pub deliveries: Vec<Delivery>,
}

impl DeliveryTrace {
    /// The original packet's delivery, if it reached a host.
    pub fn primary(&self) -> Option<&Delivery> {
        self.deliveries.iter().find(|d| d.copy == 0)
    }

    pub fn delivered_at(&self, host: &NodeId) -> impl Iterator<Item = &Delivery> {
        let host = host.clone();
        self.deliveries.iter().filter(move |d| d.host == host)
    }

    /// Nodes walked by the original packet, in order.
    pub fn primary_path(&self) -> Vec<NodeId> {
        let mut path: Vec<NodeId> = Vec::new();
        for hop in self.hops.iter().filter(|h| h.copy == 0) {
            if path.last() != Some(&hop.node) {
                path.push(hop.node.clone());
            }
        }
        path
    }
}

struct InFlight {
    packet: Packet,
    at: NodeId,
    copy: u32,
    latency: Latency,
    visited: BTreeSet<(NodeId, RuleId)>,
    forked_by: BTreeSet<RuleId>,
}

/// Topology plus one flow table per switch.
#[derive(Debug, Clone)]
pub struct Fabric {
    topology: Topology,
    tables: BTreeMap<NodeId, FlowTable>,
    next_rule: u64,
    mtu: usize,
}

impl Fabric {
    pub fn new(topology: Topology) -> Self {
        let tables = topology
            .switches()
            .map(|s| (s.clone(), FlowTable::default()))
            .collect();
        Fabric {
            topology,
            tables,
            next_rule: 1,
            mtu: DEFAULT_MTU_PAYLOAD,
        }
    }

    pub fn with_mtu(mut self, mtu: usize) -> Self {
        self.mtu = mtu;
        self
    }

    pub fn into_shared(self) -> SharedFabric {
        Arc::new(Mutex::new(self))
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn mtu(&self) -> usize {
        self.mtu
    }

    pub fn table(&self, switch: &NodeId) -> Result<&FlowTable, FabricError> {
        self.tables
            .get(switch)
            .ok_or_else(|| FabricError::UnknownSwitch(switch.clone()))
    }

    pub fn install_rule(&mut self, switch: &NodeId, rule: FlowRule) -> Result<RuleId, FabricError> {
        if !self.tables.contains_key(switch) {
            return Err(FabricError::UnknownSwitch(switch.clone()));
        }
        rule.validate()?;
        for action in &rule.actions {
            if let Action::Forward { next_hop } | Action::Duplicate { next_hop } = action {
                if self.topology.link_latency(switch, next_hop).is_none() {
                    return Err(FabricError::InvalidRule(format!(
                        "next hop '{next_hop}' is not adjacent to '{switch}'"
                    )));
                }
            }
        }
        let id = RuleId(self.next_rule);
        self.next_rule += 1;
        self.tables
            .get_mut(switch)
            .unwrap()
            .insert(InstalledRule { id, rule });
        Ok(id)
    }

    pub fn remove_rule(&mut self, switch: &NodeId, id: RuleId) -> Result<(), FabricError> {
        let table = self
            .tables
            .get_mut(switch)
            .ok_or_else(|| FabricError::UnknownSwitch(switch.clone()))?;
        table
            .remove(id)
            .map(|_| ())
            .ok_or(FabricError::UnknownRule {
                switch: switch.clone(),
                rule: id,
            })
    }

    pub fn match_rule(
        &self,
        switch: &NodeId,
        packet: &Packet,
    ) -> Result<Option<&InstalledRule>, FabricError> {
        Ok(self.table(switch)?.lookup(&packet.flow, packet.protocol))
    }

    pub fn shortest_path(&self, a: &NodeId, b: &NodeId) -> Result<Vec<NodeId>, FabricError> {
        self.topology.shortest_path(a, b)
    }

    /// Walks `packet` from `from_host` through the fabric.
    pub fn inject_packet(
        &self,
        from_host: &NodeId,
        packet: Packet,
    ) -> Result<DeliveryTrace, FabricError> {
        let host = self
            .topology
            .host(from_host)
            .ok_or_else(|| FabricError::UnknownHost(from_host.clone()))?;
        if packet.payload.len() > self.mtu {
            return Err(FabricError::PayloadTooLarge {
                len: packet.payload.len(),
                mtu: self.mtu,
            });
        }

        let mut trace = DeliveryTrace {
            hops: vec![Hop {
                node: from_host.clone(),
                copy: 0,
                action: HopAction::Emit {
                    to: host.switch.clone(),
                },
            }],
            accumulated_latency: Latency::ZERO,
            delivered_to: BTreeSet::new(),
            deliveries: Vec::new(),
        };
        let access = self
            .topology
            .link_latency(from_host, &host.switch)
            .expect("host link exists");
        let mut copies = 0u32;
        let mut queue = VecDeque::from([InFlight {
            packet,
            at: host.switch.clone(),
            copy: 0,
            latency: access,
            visited: BTreeSet::new(),
            forked_by: BTreeSet::new(),
        }]);

        while let Some(mut pkt) = queue.pop_front() {
            let node = pkt.at.clone();
            let hop = |action| Hop {
                node: node.clone(),
                copy: pkt.copy,
                action,
            };

            if !self.topology.is_switch(&node) {
                trace.hops.push(hop(HopAction::Deliver));
                if pkt.copy == 0 {
                    trace.accumulated_latency = pkt.latency;
                }
                trace.delivered_to.insert(node.clone());
                trace.deliveries.push(Delivery {
                    host: node,
                    copy: pkt.copy,
                    latency: pkt.latency,
                    packet: pkt.packet,
                });
                continue;
            }

            let Some(rule) = self.tables[&node].lookup(&pkt.packet.flow, pkt.packet.protocol)
            else {
                trace.hops.push(hop(HopAction::Drop {
                    reason: DropReason::NoMatchingRule,
                }));
                if pkt.copy == 0 {
                    trace.accumulated_latency = pkt.latency;
                }
                continue;
            };
            if !pkt.visited.insert((node.clone(), rule.id)) {
                trace.hops.push(hop(HopAction::Drop {
                    reason: DropReason::Loop { rule: rule.id },
                }));
                if pkt.copy == 0 {
                    trace.accumulated_latency = pkt.latency;
                }
                continue;
            }

            let mut header = pkt.packet.flow;
            for action in &rule.rule.actions {
                match action {
                    Action::RewriteDst { ip, port } => {
                        header.dst_ip = *ip;
                        header.dst_port = *port;
                        trace.hops.push(hop(HopAction::Rewrite {
                            rule: rule.id,
                            ip: *ip,
                            port: *port,
                        }));
                    }
                    Action::Forward { next_hop } => {
                        trace.hops.push(hop(HopAction::Forward {
                            rule: rule.id,
                            to: next_hop.clone(),
                        }));
                        let mut packet = pkt.packet.clone();
                        packet.flow = header;
                        queue.push_back(InFlight {
                            packet,
                            at: next_hop.clone(),
                            copy: pkt.copy,
                            latency: pkt.latency + self.link(&node, next_hop),
                            visited: pkt.visited.clone(),
                            forked_by: pkt.forked_by.clone(),
                        });
                    }
                    Action::Duplicate { next_hop } => {
                        if pkt.forked_by.contains(&rule.id) {
                            trace
                                .hops
                                .push(hop(HopAction::SkipDuplicate { rule: rule.id }));
                            continue;
                        }
                        copies += 1;
                        trace.hops.push(hop(HopAction::Duplicate {
                            rule: rule.id,
                            to: next_hop.clone(),
                            copy: copies,
                        }));
                        let mut packet = pkt.packet.clone();
                        packet.flow = header;
                        let mut forked_by = pkt.forked_by.clone();
                        forked_by.insert(rule.id);
                        queue.push_back(InFlight {
                            packet,
                            at: next_hop.clone(),
                            copy: copies,
                            latency: pkt.latency + self.link(&node, next_hop),
                            visited: pkt.visited.clone(),
                            forked_by,
                        });
                    }
                    Action::Drop => {
                        trace.hops.push(hop(HopAction::Drop {
                            reason: DropReason::RuleDrop { rule: rule.id },
                        }));
                        if pkt.copy == 0 {
                            trace.accumulated_latency = pkt.latency;
                        }
                    }
                }
            }
        }
        Ok(trace)
    }

    fn link(&self, a: &NodeId, b: &NodeId) -> Latency {
        self.topology
            .link_latency(a, b)
            .expect("next hops are validated at install")
    }
}
