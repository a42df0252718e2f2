use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::FabricError;

/// Identifier of a switch or host. Unique across both kinds.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

impl PartialEq<str> for NodeId {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for NodeId {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

/// Link latency in whole microseconds.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Latency(u64);

impl Latency {
    pub const ZERO: Latency = Latency(0);

    pub fn from_micros(us: u64) -> Self {
        Latency(us)
    }

    pub fn from_millis_f64(ms: f64) -> Self {
        Latency((ms * 1000.0).round() as u64)
    }

    pub fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl std::ops::Add for Latency {
    type Output = Latency;
    fn add(self, rhs: Latency) -> Latency {
        Latency(self.0 + rhs.0)
    }
}

impl std::ops::AddAssign for Latency {
    fn add_assign(&mut self, rhs: Latency) {
        self.0 += rhs.0;
    }
}

impl std::iter::Sum for Latency {
    fn sum<I: Iterator<Item = Latency>>(iter: I) -> Latency {
        iter.fold(Latency::ZERO, |a, b| a + b)
    }
}

/// On-disk topology document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyDocument {
    pub switches: Vec<String>,
    pub hosts: Vec<HostEntry>,
    pub links: Vec<LinkEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostEntry {
    pub id: String,
    pub switch: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ip: Option<Ipv4Addr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkEntry {
    pub a: String,
    pub b: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostInfo {
    pub switch: NodeId,
    pub ip: Ipv4Addr,
}

/// A validated switch/host graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    switches: BTreeSet<NodeId>,
    hosts: BTreeMap<NodeId, HostInfo>,
    adjacency: BTreeMap<NodeId, BTreeMap<NodeId, Latency>>,
    by_ip: BTreeMap<Ipv4Addr, NodeId>,
}

/// Parses and validates a JSON topology document.
pub fn load_topology(json: &str) -> Result<Topology, FabricError> {
    let doc: TopologyDocument =
        serde_json::from_str(json).map_err(|e| FabricError::Parse(e.to_string()))?;
    Topology::from_document(&doc)
}

impl Topology {
    pub fn from_document(doc: &TopologyDocument) -> Result<Topology, FabricError> {
        let invalid = |msg: String| Err(FabricError::InvalidTopology(msg));

        let mut switches = BTreeSet::new();
        let mut all_ids = BTreeSet::new();
        for s in &doc.switches {
            if s.is_empty() {
                return invalid("empty switch id".into());
            }
            if !all_ids.insert(s.clone()) {
                return invalid(format!("duplicate node id '{s}'"));
            }
            switches.insert(NodeId::new(s.as_str()));
        }

        let mut hosts = BTreeMap::new();
        let mut by_ip = BTreeMap::new();
        for (index, h) in doc.hosts.iter().enumerate() {
            if h.id.is_empty() {
                return invalid("empty host id".into());
            }
            if !all_ids.insert(h.id.clone()) {
                return invalid(format!("duplicate node id '{}'", h.id));
            }
            let switch = NodeId::new(h.switch.as_str());
            if !switches.contains(&switch) {
                return invalid(format!(
                    "host '{}' attaches to unknown switch '{}'",
                    h.id, h.switch
                ));
            }
            let ip = match h.ip {
                Some(ip) => ip,
                None => default_host_ip(index)?,
            };
            if let Some(other) = by_ip.insert(ip, NodeId::new(h.id.as_str())) {
                return invalid(format!("hosts '{other}' and '{}' share ip {ip}", h.id));
            }
            hosts.insert(NodeId::new(h.id.as_str()), HostInfo { switch, ip });
        }

        let mut adjacency: BTreeMap<NodeId, BTreeMap<NodeId, Latency>> = BTreeMap::new();
        for id in switches.iter().chain(hosts.keys()) {
            adjacency.insert(id.clone(), BTreeMap::new());
        }
        for link in &doc.links {
            let (a, b) = (NodeId::new(link.a.as_str()), NodeId::new(link.b.as_str()));
            if !adjacency.contains_key(&a) {
                return invalid(format!("link references unknown node '{a}'"));
            }
            if !adjacency.contains_key(&b) {
                return invalid(format!("link references unknown node '{b}'"));
            }
            if a == b {
                return invalid(format!("self-loop on '{a}'"));
            }
            if !link.latency_ms.is_finite() || link.latency_ms < 0.0 {
                return invalid(format!(
                    "link {a}-{b} has invalid latency {}",
                    link.latency_ms
                ));
            }
            if adjacency[&a].contains_key(&b) {
                return invalid(format!("more than one link between '{a}' and '{b}'"));
            }
            let latency = Latency::from_millis_f64(link.latency_ms);
            adjacency.get_mut(&a).unwrap().insert(b.clone(), latency);
            adjacency.get_mut(&b).unwrap().insert(a, latency);
        }

        for (id, info) in &hosts {
            let links = &adjacency[id];
            if links.len() != 1 || !links.contains_key(&info.switch) {
                return invalid(format!(
                    "host '{id}' must have exactly one link, to its switch '{}'",
                    info.switch
                ));
            }
        }

        let topology = Topology {
            switches,
            hosts,
            adjacency,
            by_ip,
        };
        topology.check_connected()?;
        Ok(topology)
    }

    fn check_connected(&self) -> Result<(), FabricError> {
        let Some(start) = self.adjacency.keys().next() else {
            return Err(FabricError::InvalidTopology("topology has no nodes".into()));
        };
        let mut seen = BTreeSet::from([start.clone()]);
        let mut stack = vec![start.clone()];
        while let Some(n) = stack.pop() {
            for m in self.adjacency[&n].keys() {
                if seen.insert(m.clone()) {
                    stack.push(m.clone());
                }
            }
        }
        if let Some(missing) = self.adjacency.keys().find(|n| !seen.contains(*n)) {
            return Err(FabricError::InvalidTopology(format!(
                "topology is disconnected: '{missing}' unreachable from '{start}'"
            )));
        }
        Ok(())
    }

    pub fn to_document(&self) -> TopologyDocument {
        let mut links = Vec::new();
        for (a, neigh) in &self.adjacency {
            for (b, lat) in neigh {
                if a < b {
                    links.push(LinkEntry {
                        a: a.to_string(),
                        b: b.to_string(),
                        latency_ms: lat.as_millis_f64(),
                    });
                }
            }
        }
        TopologyDocument {
            switches: self.switches.iter().map(|s| s.to_string()).collect(),
            hosts: self
                .hosts
                .iter()
                .map(|(id, h)| HostEntry {
                    id: id.to_string(),
                    switch: h.switch.to_string(),
                    ip: Some(h.ip),
                })
                .collect(),
            links,
        }
    }

    pub fn switches(&self) -> impl Iterator<Item = &NodeId> {
        self.switches.iter()
    }

    pub fn hosts(&self) -> impl Iterator<Item = (&NodeId, &HostInfo)> {
        self.hosts.iter()
    }

    pub fn is_switch(&self, id: &NodeId) -> bool {
        self.switches.contains(id)
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.adjacency.contains_key(id)
    }

    pub fn host(&self, id: &NodeId) -> Option<&HostInfo> {
        self.hosts.get(id)
    }

    pub fn host_by_ip(&self, ip: Ipv4Addr) -> Option<&NodeId> {
        self.by_ip.get(&ip)
    }

    /// Hosts attached to `switch`, in id order.
    pub fn hosts_on<'a>(&'a self, switch: &'a NodeId) -> impl Iterator<Item = &'a NodeId> + 'a {
        self.hosts
            .iter()
            .filter(move |(_, h)| &h.switch == switch)
            .map(|(id, _)| id)
    }

    pub fn neighbors(&self, id: &NodeId) -> impl Iterator<Item = (&NodeId, Latency)> {
        self.adjacency
            .get(id)
            .into_iter()
            .flat_map(|m| m.iter().map(|(n, l)| (n, *l)))
    }

    pub fn link_latency(&self, a: &NodeId, b: &NodeId) -> Option<Latency> {
        self.adjacency.get(a)?.get(b).copied()
    }

    /// Sum of link latencies along `path`; `None` if two consecutive nodes
    /// are not linked.
    pub fn path_latency(&self, path: &[NodeId]) -> Option<Latency> {
        path.windows(2)
            .map(|w| self.link_latency(&w[0], &w[1]))
            .sum()
    }

    /// Minimum-latency path from `from` to `to`, both inclusive. Among
    /// equal-latency paths the lexicographically smallest node sequence wins.
    pub fn shortest_path(&self, from: &NodeId, to: &NodeId) -> Result<Vec<NodeId>, FabricError> {
        for id in [from, to] {
            if !self.contains(id) {
                return Err(FabricError::UnknownNode(id.clone()));
            }
        }
        // Labels are (cost, path); lexicographic order on the path is
        // preserved under extension, so the first settled label per node
        // is the tie-broken optimum.
        let mut settled: BTreeSet<&NodeId> = BTreeSet::new();
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((Latency::ZERO, vec![from.clone()])));
        while let Some(Reverse((cost, path))) = heap.pop() {
            let node = path.last().unwrap();
            if !settled.insert(self.adjacency.get_key_value(node).unwrap().0) {
                continue;
            }
            if node == to {
                return Ok(path);
            }
            // Hosts terminate paths; they never relay.
            if node != from && !self.is_switch(node) {
                continue;
            }
            for (next, lat) in self.neighbors(node) {
                if settled.contains(next) {
                    continue;
                }
                let mut extended = path.clone();
                extended.push(next.clone());
                heap.push(Reverse((cost + lat, extended)));
            }
        }
        // Connectivity is validated at load.
        unreachable!("no path from {from} to {to} in a connected topology")
    }

    pub fn shortest_path_latency(
        &self,
        from: &NodeId,
        to: &NodeId,
    ) -> Result<Latency, FabricError> {
        let path = self.shortest_path(from, to)?;
        Ok(self.path_latency(&path).expect("path follows links"))
    }

    /// First hop on the shortest path from `from` toward `to`.
    pub fn next_hop(&self, from: &NodeId, to: &NodeId) -> Result<Option<NodeId>, FabricError> {
        let path = self.shortest_path(from, to)?;
        Ok(path.get(1).cloned())
    }
}

fn default_host_ip(index: usize) -> Result<Ipv4Addr, FabricError> {
    let n = index + 1;
    if n > 0xFFFE {
        return Err(FabricError::InvalidTopology(
            "too many hosts for default addressing".into(),
        ));
    }
    Ok(Ipv4Addr::new(10, 0, (n >> 8) as u8, (n & 0xFF) as u8))
}
