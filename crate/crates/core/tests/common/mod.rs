//! Random topologies and brute-force oracles shared by the integration
//! tests and the acceptance suite.

#![allow(dead_code)]

use std::collections::BTreeMap;

use contentnet::fabric::{HostEntry, LinkEntry, NodeId, Topology, TopologyDocument};
use rand::seq::SliceRandom;
use rand::Rng;

pub struct RandomNet {
    pub doc: TopologyDocument,
    pub topology: Topology,
    pub origin: NodeId,
    pub proxy: NodeId,
    pub cache: NodeId,
}

/// A connected topology of at most `max_nodes` nodes: a random spanning
/// tree of switches plus chords, and three hosts. Small integer latencies
/// make equal-cost paths common.
pub fn random_net<R: Rng>(rng: &mut R, max_nodes: usize) -> RandomNet {
    assert!(max_nodes >= 4);
    let n = rng.gen_range(1..=max_nodes - 3);
    let mut labels: Vec<usize> = (0..n).collect();
    labels.shuffle(rng);
    let switches: Vec<String> = labels.iter().map(|i| format!("s{i:02}")).collect();

    let mut links = Vec::new();
    let mut linked = std::collections::BTreeSet::new();
    let mut link = |a: &str, b: &str, ms: f64, links: &mut Vec<LinkEntry>| {
        let key = if a < b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        };
        if a != b && linked.insert(key) {
            links.push(LinkEntry {
                a: a.into(),
                b: b.into(),
                latency_ms: ms,
            });
        }
    };
    for i in 1..n {
        let j = rng.gen_range(0..i);
        let ms = rng.gen_range(1..=4) as f64;
        link(&switches[i], &switches[j], ms, &mut links);
    }
    for _ in 0..rng.gen_range(0..=n) {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let ms = rng.gen_range(1..=4) as f64;
        link(&switches[a], &switches[b], ms, &mut links);
    }
    let mut hosts = Vec::new();
    for (i, id) in ["origin", "proxy", "cache"].iter().enumerate() {
        let sw = switches[rng.gen_range(0..n)].clone();
        let ms = rng.gen_range(0..=2) as f64;
        link(id, &sw, ms, &mut links);
        hosts.push(HostEntry {
            id: id.to_string(),
            switch: sw,
            ip: Some(std::net::Ipv4Addr::new(10, 0, 0, i as u8 + 1)),
        });
    }
    let doc = TopologyDocument {
        switches,
        hosts,
        links,
    };
    let topology = Topology::from_document(&doc).expect("generated topology is valid");
    RandomNet {
        doc,
        topology,
        origin: "origin".into(),
        proxy: "proxy".into(),
        cache: "cache".into(),
    }
}

/// Adjacency with latencies in microseconds, built from the raw document.
pub struct Graph {
    adj: BTreeMap<String, Vec<(String, u64)>>,
    switches: std::collections::BTreeSet<String>,
}

impl Graph {
    pub fn new(doc: &TopologyDocument) -> Self {
        let mut adj: BTreeMap<String, Vec<(String, u64)>> = BTreeMap::new();
        for l in &doc.links {
            let us = (l.latency_ms * 1000.0).round() as u64;
            adj.entry(l.a.clone()).or_default().push((l.b.clone(), us));
            adj.entry(l.b.clone()).or_default().push((l.a.clone(), us));
        }
        Graph {
            adj,
            switches: doc.switches.iter().cloned().collect(),
        }
    }

    /// Every simple path from `from` to `to` whose interior is switches,
    /// with its latency.
    pub fn all_paths(&self, from: &str, to: &str) -> Vec<(u64, Vec<String>)> {
        let mut out = Vec::new();
        let mut path = vec![from.to_string()];
        self.walk(to, 0, &mut path, &mut out);
        out
    }

    fn walk(&self, to: &str, cost: u64, path: &mut Vec<String>, out: &mut Vec<(u64, Vec<String>)>) {
        let here = path.last().unwrap().clone();
        if here == to {
            out.push((cost, path.clone()));
            return;
        }
        if path.len() > 1 && !self.switches.contains(&here) {
            return;
        }
        for (next, us) in self.adj.get(&here).into_iter().flatten() {
            if path.contains(next) {
                continue;
            }
            path.push(next.clone());
            self.walk(to, cost + us, path, out);
            path.pop();
        }
    }

    /// Cheapest path; ties go to the lexicographically smallest sequence.
    pub fn best_path(&self, from: &str, to: &str) -> (u64, Vec<String>) {
        self.all_paths(from, to)
            .into_iter()
            .min()
            .expect("connected")
    }
}

#[derive(Debug, PartialEq, Eq)]
pub struct OracleFork {
    pub switch: String,
    pub primary_path: Vec<String>,
    pub cache_path: Vec<String>,
    pub cache_latency_us: u64,
}

/// Argmin over the switches of the origin→proxy path of the distance to
/// the cache; the earliest switch on the path wins ties.
pub fn oracle_fork(g: &Graph, origin: &str, proxy: &str, cache: &str) -> OracleFork {
    let (_, primary) = g.best_path(origin, proxy);
    let mut best: Option<(u64, String, Vec<String>)> = None;
    for s in primary.iter().filter(|n| g.switches.contains(*n)) {
        let (lat, path) = g.best_path(s, cache);
        if best.as_ref().is_none_or(|(l, _, _)| lat < *l) {
            best = Some((lat, s.clone(), path));
        }
    }
    let (cache_latency_us, switch, cache_path) = best.expect("path crosses a switch");
    OracleFork {
        switch,
        primary_path: primary,
        cache_path,
        cache_latency_us,
    }
}

pub fn names(path: &[NodeId]) -> Vec<String> {
    path.iter().map(|n| n.as_str().to_string()).collect()
}
