//! Where to mirror an origin's response so the copy travels least.

use contentnet::controller::compute_fork_point;
use contentnet::fabric::{load_topology, NodeId};

const TOPOLOGY: &str = r#"{
  "switches": ["a", "b", "c", "d", "e"],
  "hosts": [
    {"id": "proxy",  "switch": "a"},
    {"id": "origin", "switch": "d"},
    {"id": "near",   "switch": "c"},
    {"id": "far",    "switch": "e"}
  ],
  "links": [
    {"a": "a", "b": "b", "latency_ms": 1},
    {"a": "b", "b": "c", "latency_ms": 5},
    {"a": "c", "b": "d", "latency_ms": 20},
    {"a": "b", "b": "e", "latency_ms": 3},
    {"a": "proxy",  "b": "a", "latency_ms": 0.1},
    {"a": "origin", "b": "d", "latency_ms": 0.1},
    {"a": "near",   "b": "c", "latency_ms": 0.1},
    {"a": "far",    "b": "e", "latency_ms": 0.1}
  ]
}"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let topology = load_topology(TOPOLOGY)?;
    let (origin, proxy) = (NodeId::new("origin"), NodeId::new("proxy"));
    for cache in ["near", "far"] {
        let fork = compute_fork_point(&topology, &origin, &proxy, &NodeId::new(cache))?;
        let path: Vec<&str> = fork.primary_path.iter().map(NodeId::as_str).collect();
        let branch: Vec<&str> = fork.cache_path.iter().map(NodeId::as_str).collect();
        println!(
            "cache {cache:<4}: fork at {} on {} -> branch {} ({:.1} ms)",
            fork.switch,
            path.join("-"),
            branch.join("-"),
            fork.cache_latency.as_millis_f64()
        );
    }
    Ok(())
}
