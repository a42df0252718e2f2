//! A storage session on a virtual clock: registration, keep-alives, usage
//! reports, and expiry that withdraws the cache's entries.

use std::sync::Arc;
use std::time::Duration;

use contentnet::clock::ManualClock;
use contentnet::controller::{ContentMetadata, Controller, ControllerConfig, StorageCapability};
use contentnet::fabric::{load_topology, Fabric};
use contentnet::flow::FlowKey;

const TOPOLOGY: &str = r#"{
  "switches": ["s1", "s2"],
  "hosts": [
    {"id": "proxy",  "switch": "s1", "ip": "10.0.0.2"},
    {"id": "cache",  "switch": "s1", "ip": "10.0.0.3"},
    {"id": "origin", "switch": "s2", "ip": "10.0.0.4"}
  ],
  "links": [
    {"a": "s1", "b": "s2", "latency_ms": 30},
    {"a": "proxy", "b": "s1", "latency_ms": 0.1},
    {"a": "cache", "b": "s1", "latency_ms": 0.1},
    {"a": "origin", "b": "s2", "latency_ms": 0.1}
  ]
}"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clock = ManualClock::new();
    let config = ControllerConfig::default();
    let interval = Duration::from_millis(config.heartbeat_interval_ms);
    let mut c = Controller::new(config)
        .with_clock(Arc::new(clock.clone()))
        .with_fabric(Fabric::new(load_topology(TOPOLOGY)?).into_shared());
    c.install_base_routes()?;

    let id = c.register_storage(StorageCapability::new("10.0.0.3:8080".parse()?, 10_000_000))?;
    let request = FlowKey::new("10.0.0.2:20001".parse()?, "10.0.0.4:80".parse()?);
    c.report_metadata(&ContentMetadata::new("a.bin", request))?;
    let name = c.cache_query("10.0.0.4".parse()?).expect("pending name");
    c.confirm_stored(id, &name)?;
    c.report_stats(id, 4096, 1, &[])?;
    println!(
        "t=0s     session {id}: {}, lookup {:?}",
        c.session(id).unwrap().state,
        c.lookup_content("a.bin")
    );

    for _ in 0..2 {
        clock.advance(interval);
        c.heartbeat(id)?;
    }
    println!(
        "t=10s    heartbeats keep it {}",
        c.session(id).unwrap().state
    );

    clock.advance(interval * 3);
    c.sweep();
    println!(
        "t=25s    silent for three intervals: {}, lookup {:?}",
        c.session(id).unwrap().state,
        c.lookup_content("a.bin")
    );
    println!("heartbeat now fails: {}", c.heartbeat(id).unwrap_err());

    let again = c.register_storage(StorageCapability::new("10.0.0.3:8080".parse()?, 10_000_000))?;
    c.deregister_storage(again)?;
    println!(
        "re-registered as {again}, then closed: {}",
        c.session(again).unwrap().state
    );
    Ok(())
}
