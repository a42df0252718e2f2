use std::collections::HashMap;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::sync::{Arc, Mutex};

use super::*;
use crate::clock::ManualClock;

const ORIGIN: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 4);

/// Records what the cache asks of the controller.
#[derive(Default)]
struct FakeController {
    pending: Mutex<HashMap<Ipv4Addr, String>>,
    confirmed: Mutex<Vec<String>>,
    stats: Mutex<Vec<StatsReport>>,
    queries: Mutex<usize>,
    confirm_fails: bool,
}

impl ControllerClient for FakeController {
    fn lookup_content(&self, _: &str) -> Result<Option<CacheLocation>, ClientError> {
        Ok(None)
    }
    fn report_metadata(&self, _: &ContentMetadata) -> Result<(), ClientError> {
        Ok(())
    }
    fn cache_query(&self, ip: Ipv4Addr) -> Result<Option<String>, ClientError> {
        *self.queries.lock().unwrap() += 1;
        Ok(self.pending.lock().unwrap().remove(&ip))
    }
    fn register_storage(&self, _: &StorageCapability) -> Result<SessionId, ClientError> {
        Ok(SessionId(1))
    }
    fn heartbeat(&self, _: SessionId) -> Result<(), ClientError> {
        Ok(())
    }
    fn report_stats(&self, s: &StatsReport) -> Result<(), ClientError> {
        self.stats.lock().unwrap().push(s.clone());
        Ok(())
    }
    fn confirm_stored(&self, _: SessionId, name: &str) -> Result<(), ClientError> {
        if self.confirm_fails {
            return Err(ClientError::Unreachable("down".into()));
        }
        self.confirmed.lock().unwrap().push(name.to_string());
        Ok(())
    }
    fn deregister_storage(&self, _: SessionId) -> Result<(), ClientError> {
        Ok(())
    }
}

fn cache_with(fake: Arc<FakeController>, capacity: u64) -> (Cache, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let config = CacheConfig::new(
        SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 3), 8080),
        capacity,
        dir.path(),
    );
    let cache = Cache::open(config, fake, Arc::new(ManualClock::new())).unwrap();
    cache.register().unwrap();
    (cache, dir)
}

fn response(body: &[u8]) -> Vec<u8> {
    let mut r = format!(
        "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nContent-Type: application/octet-stream\r\n\r\n",
        body.len()
    )
    .into_bytes();
    r.extend_from_slice(body);
    r
}

fn flow() -> FlowKey {
    FlowKey::new(
        SocketAddrV4::new(ORIGIN, 80),
        SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 3), 8080),
    )
}

#[test]
fn pending_name_is_stored_then_confirmed() {
    let fake = Arc::new(FakeController::default());
    fake.pending.lock().unwrap().insert(ORIGIN, "a.bin".into());
    let (cache, _dir) = cache_with(Arc::clone(&fake), 1 << 20);
    let out = cache.ingest(flow(), &response(b"payload"));
    assert!(matches!(out, IngestOutcome::Stored(ref n) if n == "a.bin"));
    assert_eq!(*fake.confirmed.lock().unwrap(), vec!["a.bin".to_string()]);

    let served = cache.serve("a.bin");
    assert_eq!(served.status, 200);
    assert_eq!(served.body, b"payload");
    assert_eq!(served.header("Content-Length"), Some("7"));
    assert_eq!(
        served.header("Content-Type"),
        Some("application/octet-stream")
    );
    assert_eq!(cache.serve("other").status, 404);
}

#[test]
fn unclaimed_stream_is_discarded() {
    let fake = Arc::new(FakeController::default());
    let (cache, _dir) = cache_with(Arc::clone(&fake), 1 << 20);
    assert!(matches!(
        cache.ingest(flow(), &response(b"x")),
        IngestOutcome::Unclaimed
    ));
    assert!(cache.store().is_empty());
    assert!(fake.confirmed.lock().unwrap().is_empty());
}

#[test]
fn non_200_is_discarded_without_asking() {
    let fake = Arc::new(FakeController::default());
    fake.pending.lock().unwrap().insert(ORIGIN, "a.bin".into());
    let (cache, _dir) = cache_with(Arc::clone(&fake), 1 << 20);
    let out = cache.ingest(
        flow(),
        b"HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\n\r\n",
    );
    assert!(matches!(out, IngestOutcome::NotCacheable { status: 404 }));
    assert_eq!(*fake.queries.lock().unwrap(), 0);
    assert!(cache.store().is_empty());
}

fn body_10k() -> Vec<u8> {
    (0..10_000u32).map(|i| (i % 251) as u8).collect()
}

#[test]
fn shuffled_segments_with_syn_complete_into_a_stored_object() {
    let fake = Arc::new(FakeController::default());
    fake.pending
        .lock()
        .unwrap()
        .insert(ORIGIN, "big.bin".into());
    let (cache, _dir) = cache_with(Arc::clone(&fake), 1 << 20);
    let body = body_10k();
    let mut segs = segment_stream(flow(), 5000, &response(&body), 1460);
    // Deterministic shuffle: odd indices first, then even.
    let (odd, even): (Vec<_>, Vec<_>) = segs.drain(..).enumerate().partition(|(i, _)| i % 2 == 1);
    let order: Vec<TcpSegment> = odd.into_iter().chain(even).map(|(_, s)| s).collect();
    let (last, rest) = order.split_last().unwrap();
    for s in rest {
        assert!(matches!(cache.observe_segment(s), IngestOutcome::Buffered));
    }
    assert!(matches!(
        cache.observe_segment(last),
        IngestOutcome::Stored(_)
    ));
    assert_eq!(cache.serve("big.bin").body, body);
    assert_eq!(cache.pending_flows(), 0);
}

#[test]
fn reversed_segments_without_syn_complete_on_exact_framing() {
    let fake = Arc::new(FakeController::default());
    fake.pending
        .lock()
        .unwrap()
        .insert(ORIGIN, "big.bin".into());
    let (cache, _dir) = cache_with(Arc::clone(&fake), 1 << 20);
    let body = body_10k();
    let segs = segment_stream(flow(), 5000, &response(&body), 1460);
    let mut data: Vec<TcpSegment> = segs[1..].to_vec();
    data.reverse();
    let head = data.pop().unwrap();
    for s in &data {
        assert!(matches!(cache.observe_segment(s), IngestOutcome::Buffered));
    }
    assert!(matches!(
        cache.observe_segment(&head),
        IngestOutcome::Stored(_)
    ));
    assert_eq!(cache.serve("big.bin").body, body);
    assert_eq!(cache.pending_flows(), 0);
}

#[test]
fn evictions_ride_on_stats() {
    let fake = Arc::new(FakeController::default());
    let (cache, _dir) = cache_with(Arc::clone(&fake), 10);
    for name in ["a", "b", "c"] {
        fake.pending.lock().unwrap().insert(ORIGIN, name.into());
        cache.ingest(flow(), &response(&[0; 4]));
    }
    assert_eq!(cache.store().names(), vec!["b", "c"]);
    let stats = fake.stats.lock().unwrap();
    let last = stats.last().unwrap();
    assert_eq!(last.evicted, vec!["a".to_string()]);
    assert!(cache.store().used_bytes() <= 10);
}

#[test]
fn unconfirmed_store_is_reported_as_failure() {
    let fake = Arc::new(FakeController {
        confirm_fails: true,
        ..Default::default()
    });
    fake.pending.lock().unwrap().insert(ORIGIN, "a.bin".into());
    let (cache, _dir) = cache_with(Arc::clone(&fake), 1 << 20);
    assert!(matches!(
        cache.ingest(flow(), &response(b"x")),
        IngestOutcome::Failed(CacheError::Controller(_))
    ));
}

#[test]
fn oversized_body_is_not_confirmed() {
    let fake = Arc::new(FakeController::default());
    fake.pending.lock().unwrap().insert(ORIGIN, "a.bin".into());
    let (cache, _dir) = cache_with(Arc::clone(&fake), 4);
    assert!(matches!(
        cache.ingest(flow(), &response(b"too large")),
        IngestOutcome::Failed(CacheError::Store(StoreError::TooLarge { .. }))
    ));
    assert!(fake.confirmed.lock().unwrap().is_empty());
}

#[test]
fn unregistered_cache_refuses_to_store() {
    let fake = Arc::new(FakeController::default());
    let dir = tempfile::tempdir().unwrap();
    let config = CacheConfig::new(
        SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 3), 8080),
        100,
        dir.path(),
    );
    let cache = Cache::open(config, fake, Arc::new(ManualClock::new())).unwrap();
    assert!(matches!(
        cache.ingest(flow(), &response(b"x")),
        IngestOutcome::Failed(CacheError::NotRegistered)
    ));
}
