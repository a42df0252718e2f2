//! The proxy on real sockets in front of a scripted origin. With no cache
//! registered every request passes through; the controller still learns
//! each miss.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;

use contentnet::cache::extract_body;
use contentnet::controller::{Controller, ControllerConfig};
use contentnet::harness::{generate_files, sha256_hex, FileSpec, ScriptedOrigin};
use contentnet::proxy::{OriginResolver, ProxyConfig, ProxyServer, ProxyStats};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest = vec![FileSpec {
        name: "clip.bin".into(),
        size: 300_000,
        seed: 9,
    }];
    let content = Arc::new(generate_files(&manifest)?);
    let origin = ScriptedOrigin::new(Arc::clone(&content), "index.html");
    let handle = origin.spawn("127.0.0.1:0")?;
    let SocketAddr::V4(origin_addr) = handle.local_addr() else {
        unreachable!()
    };

    let controller = Controller::new(ControllerConfig::default()).into_shared();
    let config = ProxyConfig {
        listen: "127.0.0.1:0".into(),
        origin: OriginResolver::Fixed(origin_addr),
        ..ProxyConfig::default()
    };
    let proxy = ProxyServer::spawn(config, Arc::new(Arc::clone(&controller)))?;
    println!("origin {origin_addr}, proxy {}", proxy.local_addr());

    for target in ["/clip.bin", "http://example.test/clip.bin", "/missing.bin"] {
        let mut conn = TcpStream::connect(proxy.local_addr())?;
        write!(
            conn,
            "GET {target} HTTP/1.1\r\nHost: example.test\r\nConnection: close\r\n\r\n"
        )?;
        let mut raw = Vec::new();
        conn.read_to_end(&mut raw)?;
        let resp = extract_body(&raw)?;
        let matches =
            content.get("clip.bin").map(|b| sha256_hex(b)) == Some(sha256_hex(&resp.body));
        println!(
            "{target:<32} -> {} ({} bytes, digest match {matches})",
            resp.status,
            resp.body.len()
        );
    }

    let stats = proxy.stats();
    println!(
        "connections {}, passthroughs {}, redirects {}",
        ProxyStats::get(&stats.connections),
        ProxyStats::get(&stats.passthroughs),
        ProxyStats::get(&stats.redirects)
    );
    println!("origin saw {:?}", origin.request_counts());
    Ok(())
}
