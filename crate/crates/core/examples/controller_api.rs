//! The controller's HTTP/JSON API end to end: a cache registers, a proxy
//! reports a miss, the cache claims the name, confirms, and the next
//! lookup redirects.

use contentnet::controller::{
    ContentMetadata, Controller, ControllerClient, ControllerConfig, ControllerServer,
    HttpControllerClient, StorageCapability,
};
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
    let fabric = Fabric::new(load_topology(TOPOLOGY)?).into_shared();
    let mut controller = Controller::new(ControllerConfig::default()).with_fabric(fabric);
    controller.install_base_routes()?;
    let server = ControllerServer::spawn(controller.into_shared(), "127.0.0.1:0", 2)?;
    println!("controller at {}", server.url());
    let client = HttpControllerClient::new(&server.url());

    let session =
        client.register_storage(&StorageCapability::new("10.0.0.3:8080".parse()?, 1 << 30))?;
    client.heartbeat(session)?;
    println!("registered cache as session {session}");

    println!("lookup before: {:?}", client.lookup_content("movie.mp4")?);
    let request = FlowKey::new("10.0.0.2:20001".parse()?, "10.0.0.4:80".parse()?);
    client.report_metadata(&ContentMetadata::new("movie.mp4", request))?;

    let claimed = client.cache_query("10.0.0.4".parse()?)?;
    println!(
        "cache claims {claimed:?}; a second claim gets {:?}",
        client.cache_query("10.0.0.4".parse()?)?
    );
    client.confirm_stored(session, claimed.as_deref().unwrap())?;
    println!("lookup after: {:?}", client.lookup_content("movie.mp4")?);

    let state: serde_json::Value = ureq::get(format!("{}/admin/state", server.url()))
        .call()?
        .body_mut()
        .read_json()?;
    println!("{}", serde_json::to_string_pretty(&state)?);

    client.deregister_storage(session)?;
    println!(
        "after deregistration: {:?}",
        client.lookup_content("movie.mp4")?
    );
    Ok(())
}
