//! A response crossing a three-switch line is copied at the middle switch,
//! readdressed and carried to a cache host.

use std::net::SocketAddrV4;

use contentnet::fabric::{
    load_topology, Action, Fabric, FlowMatch, FlowRule, NodeId, Packet, TcpFlags,
};
use contentnet::flow::{FlowKey, Protocol};

const TOPOLOGY: &str = r#"{
  "switches": ["s1", "s2", "s3"],
  "hosts": [
    {"id": "proxy",  "switch": "s1", "ip": "10.0.0.2"},
    {"id": "cache",  "switch": "s2", "ip": "10.0.0.3"},
    {"id": "origin", "switch": "s3", "ip": "10.0.0.4"}
  ],
  "links": [
    {"a": "s1", "b": "s2", "latency_ms": 2},
    {"a": "s2", "b": "s3", "latency_ms": 40},
    {"a": "proxy", "b": "s1", "latency_ms": 0.1},
    {"a": "cache", "b": "s2", "latency_ms": 0.1},
    {"a": "origin", "b": "s3", "latency_ms": 0.1}
  ]
}"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut fabric = Fabric::new(load_topology(TOPOLOGY)?);
    let response = FlowKey::new("10.0.0.4:80".parse()?, "10.0.0.2:20001".parse()?);
    let cache: SocketAddrV4 = "10.0.0.3:8080".parse()?;
    let mirrored = FlowKey::new(response.src(), cache);
    let exact = |flow| FlowMatch::exact(flow, Protocol::Tcp);

    fabric.install_rule(
        &"s3".into(),
        FlowRule::new(exact(&response), vec![Action::forward("s2")], 10),
    )?;
    fabric.install_rule(
        &"s2".into(),
        FlowRule::new(
            exact(&response),
            vec![
                Action::forward("s1"),
                Action::RewriteDst {
                    ip: *cache.ip(),
                    port: cache.port(),
                },
                Action::duplicate("cache"),
            ],
            200,
        ),
    )?;
    fabric.install_rule(
        &"s1".into(),
        FlowRule::new(exact(&response), vec![Action::forward("proxy")], 10),
    )?;

    let packet = Packet::tcp(response, 1, TcpFlags::ACK, b"HTTP/1.1 200 OK\r\n".to_vec());
    let trace = fabric.inject_packet(&NodeId::new("origin"), packet)?;
    for d in &trace.deliveries {
        println!(
            "copy {} -> {:<6} after {:.1} ms, addressed {}",
            d.copy,
            d.host,
            d.latency.as_millis_f64(),
            d.packet.flow.dst()
        );
    }
    println!("original path: {:?}", trace.primary_path());
    assert_eq!(trace.deliveries.len(), 2);
    assert_eq!(
        trace
            .deliveries
            .iter()
            .find(|d| d.copy != 0)
            .unwrap()
            .packet
            .flow,
        mirrored
    );
    Ok(())
}
