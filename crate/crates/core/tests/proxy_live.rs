use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use contentnet::cache::{extract_body, Cache, CacheConfig, CacheEntry, CacheServer, ExtractedBody};
use contentnet::clock::SystemClock;
use contentnet::controller::{
    CacheLocation, ClientError, ContentMetadata, ControllerClient, HttpControllerClient, SessionId,
    StatsReport, StorageCapability,
};
use contentnet::harness::{
    generate_files, sha256_hex, ContentSet, FileSpec, OriginHandle, ScriptedOrigin,
};
use contentnet::proxy::{OriginResolver, ProxyConfig, ProxyServer, ProxyStats};

/// Redirects names in `hits`; records every metadata report.
#[derive(Default)]
struct Directory {
    hits: BTreeMap<String, CacheLocation>,
    reports: Mutex<Vec<ContentMetadata>>,
}

impl ControllerClient for Directory {
    fn lookup_content(&self, name: &str) -> Result<Option<CacheLocation>, ClientError> {
        Ok(self.hits.get(name).copied())
    }
    fn report_metadata(&self, meta: &ContentMetadata) -> Result<(), ClientError> {
        self.reports.lock().unwrap().push(meta.clone());
        Ok(())
    }
    fn cache_query(&self, _: Ipv4Addr) -> Result<Option<String>, ClientError> {
        Ok(None)
    }
    fn register_storage(&self, _: &StorageCapability) -> Result<SessionId, ClientError> {
        Ok(SessionId(1))
    }
    fn heartbeat(&self, _: SessionId) -> Result<(), ClientError> {
        Ok(())
    }
    fn report_stats(&self, _: &StatsReport) -> Result<(), ClientError> {
        Ok(())
    }
    fn confirm_stored(&self, _: SessionId, _: &str) -> Result<(), ClientError> {
        Ok(())
    }
    fn deregister_storage(&self, _: SessionId) -> Result<(), ClientError> {
        Ok(())
    }
}

struct Rig {
    content: Arc<ContentSet>,
    origin: ScriptedOrigin,
    origin_addr: SocketAddrV4,
    _origin: OriginHandle,
}

fn rig() -> Rig {
    let manifest: Vec<FileSpec> = [
        ("small.bin", 2048u64),
        ("mid.bin", 70_000),
        ("big.bin", 1_500_000),
    ]
    .iter()
    .enumerate()
    .map(|(i, (n, s))| FileSpec {
        name: n.to_string(),
        size: *s,
        seed: i as u64,
    })
    .collect();
    let content = Arc::new(generate_files(&manifest).unwrap());
    let origin = ScriptedOrigin::new(Arc::clone(&content), "index.html");
    let handle = origin.spawn("127.0.0.1:0").unwrap();
    let SocketAddr::V4(origin_addr) = handle.local_addr() else {
        panic!()
    };
    Rig {
        content,
        origin,
        origin_addr,
        _origin: handle,
    }
}

fn proxy(origin: SocketAddrV4, controller: Arc<dyn ControllerClient>) -> ProxyServer {
    let config = ProxyConfig {
        listen: "127.0.0.1:0".into(),
        origin: OriginResolver::Fixed(origin),
        connect_timeout: Duration::from_secs(2),
        head_timeout: Duration::from_secs(2),
        ..ProxyConfig::default()
    };
    ProxyServer::spawn(config, controller).unwrap()
}

fn exchange(proxy: SocketAddr, request: &[u8]) -> Vec<u8> {
    let mut conn = TcpStream::connect(proxy).unwrap();
    conn.set_read_timeout(Some(Duration::from_secs(10)))
        .unwrap();
    conn.write_all(request).unwrap();
    let mut raw = Vec::new();
    conn.read_to_end(&mut raw).unwrap();
    raw
}

fn fetch(proxy: SocketAddr, path: &str) -> ExtractedBody {
    let raw = exchange(
        proxy,
        format!("GET {path} HTTP/1.1\r\nHost: origin.test\r\n\r\n").as_bytes(),
    );
    extract_body(&raw).unwrap()
}

#[test]
fn miss_passes_through_and_reports_the_upstream_five_tuple() {
    let r = rig();
    let dir = Arc::new(Directory::default());
    let p = proxy(r.origin_addr, dir.clone());
    let resp = fetch(p.local_addr(), "/mid.bin");
    assert_eq!(resp.status, 200);
    assert_eq!(sha256_hex(&resp.body), r.content.digest("mid.bin").unwrap());

    let reports = dir.reports.lock().unwrap();
    assert_eq!(reports.len(), 1);
    let m = &reports[0];
    assert_eq!(m.file_name, "mid.bin");
    assert_eq!(
        (m.dst_ip, m.dst_port),
        (*r.origin_addr.ip(), r.origin_addr.port())
    );
    assert_ne!(m.src_port, 0);
    assert!(!m.src_ip.is_unspecified());
    assert_eq!(ProxyStats::get(&p.stats().passthroughs), 1);
}

#[test]
fn hit_is_served_by_the_cache_with_identical_bytes() {
    let r = rig();
    let dir = tempfile::tempdir().unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let SocketAddr::V4(cache_addr) = listener.local_addr().unwrap() else {
        panic!()
    };
    drop(listener);
    let cache = Arc::new(
        Cache::open(
            CacheConfig::new(cache_addr, 10 << 20, dir.path()),
            Arc::new(Directory::default()),
            Arc::new(SystemClock::new()),
        )
        .unwrap(),
    );
    let body = r.content.get("big.bin").unwrap();
    let entry = CacheEntry {
        file_name: "big.bin".into(),
        content_length: body.len() as u64,
        origin_ip: *r.origin_addr.ip(),
        stored_at_ms: 0,
        content_type: None,
    };
    cache.store().put(entry, body).unwrap();
    let _server = CacheServer::spawn(Arc::clone(&cache), &cache_addr.to_string(), 2).unwrap();

    let directory = Directory {
        hits: BTreeMap::from([("big.bin".to_string(), CacheLocation::from(cache_addr))]),
        ..Default::default()
    };
    let p = proxy(r.origin_addr, Arc::new(directory));
    let via_cache = fetch(p.local_addr(), "/big.bin");
    let via_origin = fetch(p.local_addr(), "/small.bin");
    assert_eq!(via_cache.status, 200);
    assert_eq!(via_cache.body, **body);
    assert_eq!(r.origin.request_count("big.bin"), 0);
    assert_eq!(
        sha256_hex(&via_origin.body),
        r.content.digest("small.bin").unwrap()
    );
    assert_eq!(ProxyStats::get(&p.stats().redirects), 1);
}

#[test]
fn controller_outage_fails_open() {
    let r = rig();
    let dead = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap();
    let client =
        HttpControllerClient::with_timeout(&format!("http://{dead}"), Duration::from_millis(500));
    let p = proxy(r.origin_addr, Arc::new(client));
    for name in ["small.bin", "mid.bin", "big.bin"] {
        let resp = fetch(p.local_addr(), &format!("/{name}"));
        assert_eq!(resp.status, 200);
        assert_eq!(sha256_hex(&resp.body), r.content.digest(name).unwrap());
    }
    assert_eq!(ProxyStats::get(&p.stats().passthroughs), 3);
}

#[test]
fn concurrent_mixed_connections_are_isolated() {
    let r = rig();
    let p = proxy(r.origin_addr, Arc::new(Directory::default()));
    let addr = p.local_addr();
    let handles: Vec<_> = (0..24)
        .map(|i| {
            let digests: BTreeMap<String, String> = ["small.bin", "mid.bin", "big.bin"]
                .iter()
                .map(|n| (n.to_string(), r.content.digest(n).unwrap().to_string()))
                .collect();
            std::thread::spawn(move || match i % 4 {
                0 => {
                    let raw = exchange(addr, b"GARBAGE\r\n\r\n");
                    assert!(raw.starts_with(b"HTTP/1.1 400"));
                }
                1 => {
                    // Client hangs up mid-head.
                    let mut c = TcpStream::connect(addr).unwrap();
                    c.write_all(b"GET /big.bin HTTP/1.1\r\nHo").unwrap();
                }
                _ => {
                    let name = ["small.bin", "mid.bin", "big.bin"][i % 3];
                    let resp = fetch(addr, &format!("/{name}"));
                    assert_eq!(sha256_hex(&resp.body), digests[name]);
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    assert_eq!(ProxyStats::get(&p.stats().connections), 24);
}

#[test]
fn non_get_is_tunnelled_unreported_and_bad_heads_are_refused() {
    let r = rig();
    let dir = Arc::new(Directory::default());
    let p = proxy(r.origin_addr, dir.clone());
    let raw = exchange(
        p.local_addr(),
        b"POST /small.bin HTTP/1.1\r\nHost: o\r\nContent-Length: 0\r\nConnection: close\r\n\r\n",
    );
    assert!(raw.starts_with(b"HTTP/1.1 405"));
    assert!(dir.reports.lock().unwrap().is_empty());
    assert_eq!(ProxyStats::get(&p.stats().tunnels), 1);

    let mut huge = b"GET /x HTTP/1.1\r\nX-Pad: ".to_vec();
    huge.extend(std::iter::repeat_n(b'a', 20_000));
    huge.extend_from_slice(b"\r\n\r\n");
    assert!(exchange(p.local_addr(), &huge).starts_with(b"HTTP/1.1 431"));
}

#[test]
fn unreachable_upstream_yields_502() {
    let dead = TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap();
    let SocketAddr::V4(dead) = dead else { panic!() };
    let p = proxy(dead, Arc::new(Directory::default()));
    let raw = exchange(p.local_addr(), b"GET /a HTTP/1.1\r\nHost: o\r\n\r\n");
    assert!(raw.starts_with(b"HTTP/1.1 502"));
}
