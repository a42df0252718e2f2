//! Cache element: rebuilds mirrored response streams, learns their names
//! from the controller, keeps the bodies on disk and serves them.

mod body;
mod reassembly;
pub mod replay;
mod server;
mod store;

use std::collections::HashMap;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use log::{debug, info, warn};
use thiserror::Error;

pub use body::{extract_body, BodyError, ExtractedBody, Framing};
pub use reassembly::{
    segment_stream, FlowBuffer, Reassembler, ReassemblyError, SegmentOutcome, TcpSegment,
    DEFAULT_IDLE_TIMEOUT, DEFAULT_MAX_FLOW_BYTES,
};
pub use server::CacheServer;
pub use store::{CacheEntry, ContentStore, StoreError};

use crate::clock::Clock;
use crate::controller::{
    CacheLocation, CacheNotifier, ClientError, ContentMetadata, ControllerClient, SessionId,
    StatsReport, StorageCapability,
};
use crate::flow::FlowKey;
use crate::http::HttpResponse;

#[derive(Debug, Clone)]
pub struct CacheConfig {
    /// Address advertised to the controller and used by the serve endpoint.
    pub serve_addr: SocketAddrV4,
    pub capacity_bytes: u64,
    pub content_dir: PathBuf,
    pub max_flow_bytes: usize,
    pub idle_timeout: Duration,
}

impl CacheConfig {
    pub fn new(
        serve_addr: SocketAddrV4,
        capacity_bytes: u64,
        content_dir: impl Into<PathBuf>,
    ) -> Self {
        CacheConfig {
            serve_addr,
            capacity_bytes,
            content_dir: content_dir.into(),
            max_flow_bytes: DEFAULT_MAX_FLOW_BYTES,
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
        }
    }
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Controller(#[from] ClientError),
    #[error(transparent)]
    Body(#[from] BodyError),
    #[error(transparent)]
    Reassembly(#[from] ReassemblyError),
    #[error("cache is not registered with the controller")]
    NotRegistered,
}

/// What happened to a segment or stream handed to the cache.
#[derive(Debug)]
pub enum IngestOutcome {
    Buffered,
    Stored(String),
    /// Status other than 200, or not delimited by Content-Length.
    NotCacheable {
        status: u16,
    },
    /// The controller had no pending name for the stream's source.
    Unclaimed,
    Failed(CacheError),
}

#[derive(Debug, Default)]
pub struct CacheCounters {
    pub streams: AtomicU64,
    pub stored: AtomicU64,
    pub discarded: AtomicU64,
    pub failed: AtomicU64,
    pub served: AtomicU64,
    pub not_found: AtomicU64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

pub struct Cache {
    config: CacheConfig,
    store: ContentStore,
    reassembler: Mutex<Reassembler>,
    controller: Arc<dyn ControllerClient>,
    clock: Arc<dyn Clock>,
    session: Mutex<Option<SessionId>>,
    /// Evictions not yet reported to the controller.
    unreported_evictions: Mutex<Vec<String>>,
    /// Mirrored flows the controller announced, by expected name.
    announced: Mutex<HashMap<FlowKey, String>>,
    counters: CacheCounters,
}

impl std::fmt::Debug for Cache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Cache")
            .field("config", &self.config)
            .field("session", &self.session_id())
            .field("objects", &self.store.len())
            .finish_non_exhaustive()
    }
}

impl Cache {
    pub fn open(
        config: CacheConfig,
        controller: Arc<dyn ControllerClient>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, CacheError> {
        let store = ContentStore::open(&config.content_dir, config.capacity_bytes)?;
        Ok(Cache {
            reassembler: Mutex::new(Reassembler::new(config.max_flow_bytes, config.idle_timeout)),
            config,
            store,
            controller,
            clock,
            session: Mutex::new(None),
            unreported_evictions: Mutex::new(Vec::new()),
            announced: Mutex::new(HashMap::new()),
            counters: CacheCounters::default(),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn store(&self) -> &ContentStore {
        &self.store
    }

    pub fn counters(&self) -> &CacheCounters {
        &self.counters
    }

    pub fn session_id(&self) -> Option<SessionId> {
        *self.session.lock().unwrap()
    }

    pub fn location(&self) -> CacheLocation {
        self.config.serve_addr.into()
    }

    /// Registers with the controller and reports what is already on disk.
    pub fn register(&self) -> Result<SessionId, CacheError> {
        let cap = StorageCapability::new(self.config.serve_addr, self.config.capacity_bytes);
        let id = self.controller.register_storage(&cap)?;
        *self.session.lock().unwrap() = Some(id);
        info!("registered as storage session {id}");
        self.report_stats()?;
        Ok(id)
    }

    pub fn heartbeat(&self) -> Result<(), CacheError> {
        let id = self.session_id().ok_or(CacheError::NotRegistered)?;
        Ok(self.controller.heartbeat(id)?)
    }

    /// Sends usage and any evictions since the last successful report.
    pub fn report_stats(&self) -> Result<(), CacheError> {
        let id = self.session_id().ok_or(CacheError::NotRegistered)?;
        let evicted = std::mem::take(&mut *self.unreported_evictions.lock().unwrap());
        let report = StatsReport {
            session_id: id,
            used_bytes: self.store.used_bytes(),
            object_count: self.store.len() as u64,
            evicted,
        };
        if let Err(e) = self.controller.report_stats(&report) {
            self.unreported_evictions
                .lock()
                .unwrap()
                .extend(report.evicted);
            return Err(e.into());
        }
        Ok(())
    }

    pub fn deregister(&self) -> Result<(), CacheError> {
        let Some(id) = self.session.lock().unwrap().take() else {
            return Ok(());
        };
        Ok(self.controller.deregister_storage(id)?)
    }

    /// Feeds one captured segment; a completed stream is resolved and
    /// stored before this returns.
    pub fn observe_segment(&self, segment: &TcpSegment) -> IngestOutcome {
        let now = self.clock.now();
        let mut reassembler = self.reassembler.lock().unwrap();
        let outcome = reassembler.observe_segment(segment, now);
        let outcome = match outcome {
            SegmentOutcome::Unanchored => {
                match Self::framed_candidate(&mut reassembler, &segment.flow) {
                    Some(stream) => SegmentOutcome::Complete(stream),
                    None => SegmentOutcome::Buffered,
                }
            }
            other => other,
        };
        drop(reassembler);
        match outcome {
            SegmentOutcome::Buffered | SegmentOutcome::Unanchored => IngestOutcome::Buffered,
            SegmentOutcome::Complete(stream) => self.ingest(segment.flow, &stream),
            SegmentOutcome::Dropped(e) => {
                warn!("abandoning flow {}: {e}", segment.flow);
                bump(&self.counters.failed);
                IngestOutcome::Failed(e.into())
            }
        }
    }

    /// Without a captured SYN the stream start is unknown, so a flow is
    /// only released once it reads as exactly one Content-Length framed
    /// response.
    fn framed_candidate(reassembler: &mut Reassembler, flow: &FlowKey) -> Option<Vec<u8>> {
        if !reassembler
            .flow(flow)?
            .leading_bytes()
            .starts_with(b"HTTP/")
        {
            return None;
        }
        let stream = reassembler.peek(flow)?;
        match extract_body(&stream) {
            Ok(b) if matches!(b.framing, Framing::ContentLength(_)) && b.trailing == 0 => {
                reassembler.reassemble(flow).ok()
            }
            _ => None,
        }
    }

    /// Handles a complete response stream for `flow`.
    pub fn ingest(&self, flow: FlowKey, stream: &[u8]) -> IngestOutcome {
        bump(&self.counters.streams);
        if let Some(name) = self.announced.lock().unwrap().remove(&flow) {
            debug!("stream {flow} was announced as '{name}'");
        }
        let extracted = match extract_body(stream) {
            Ok(b) => b,
            Err(e) => {
                bump(&self.counters.failed);
                return IngestOutcome::Failed(e.into());
            }
        };
        match self.resolve_and_store(flow, &extracted) {
            Ok(outcome) => outcome,
            Err(e) => {
                warn!("could not store stream {flow}: {e}");
                bump(&self.counters.failed);
                IngestOutcome::Failed(e)
            }
        }
    }

    /// Asks the controller which file `flow` carries, persists the body
    /// under that name and confirms it. Nothing is stored without a name
    /// from the controller, and nothing is confirmed unless persisted.
    pub fn resolve_and_store(
        &self,
        flow: FlowKey,
        body: &ExtractedBody,
    ) -> Result<IngestOutcome, CacheError> {
        if !body.is_cacheable() {
            bump(&self.counters.discarded);
            return Ok(IngestOutcome::NotCacheable {
                status: body.status,
            });
        }
        let session = self.session_id().ok_or(CacheError::NotRegistered)?;
        let Some(name) = self.controller.cache_query(flow.src_ip)? else {
            debug!("no pending request from {}; discarding", flow.src_ip);
            bump(&self.counters.discarded);
            return Ok(IngestOutcome::Unclaimed);
        };
        let entry = CacheEntry {
            file_name: name.clone(),
            content_length: body.body.len() as u64,
            origin_ip: flow.src_ip,
            stored_at_ms: self.clock.now().as_millis() as u64,
            content_type: body.content_type.clone(),
        };
        let evicted = self.store.put(entry, &body.body)?;
        if !evicted.is_empty() {
            self.unreported_evictions.lock().unwrap().extend(evicted);
            if let Err(e) = self.report_stats() {
                warn!("eviction report deferred: {e}");
            }
        }
        self.controller.confirm_stored(session, &name)?;
        bump(&self.counters.stored);
        info!("stored '{name}' ({} bytes)", body.body.len());
        Ok(IngestOutcome::Stored(name))
    }

    pub fn serve(&self, file_name: &str) -> HttpResponse {
        match self.store.get(file_name) {
            Ok(Some((entry, body))) => {
                bump(&self.counters.served);
                let resp = HttpResponse::new(200, body);
                match entry.content_type {
                    Some(ct) => resp.with_header("Content-Type", &ct),
                    None => resp,
                }
            }
            Ok(None) => {
                bump(&self.counters.not_found);
                HttpResponse::new(404, b"not cached\n".to_vec())
            }
            Err(e) => {
                warn!("reading '{file_name}' failed: {e}");
                HttpResponse::new(500, Vec::new())
            }
        }
    }

    /// Drops partially received flows that went quiet.
    pub fn purge_idle(&self) -> Vec<FlowKey> {
        let purged = self
            .reassembler
            .lock()
            .unwrap()
            .purge_idle(self.clock.now());
        if !purged.is_empty() {
            let mut announced = self.announced.lock().unwrap();
            for f in &purged {
                announced.remove(f);
            }
        }
        purged
    }

    pub fn pending_flows(&self) -> usize {
        self.reassembler.lock().unwrap().pending_flows()
    }

    /// Heartbeats, stats and idle purging on a background thread.
    pub fn spawn_maintenance(self: &Arc<Self>, interval: Duration) -> Maintenance {
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let cache = Arc::clone(self);
            let stop = Arc::clone(&stop);
            std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    if let Err(e) = cache.heartbeat().and_then(|_| cache.report_stats()) {
                        warn!("maintenance round failed: {e}");
                    }
                    cache.purge_idle();
                    std::thread::park_timeout(interval);
                }
            })
        };
        Maintenance {
            stop,
            handle: Some(handle),
        }
    }
}

impl CacheNotifier for Cache {
    fn expect_content(&self, meta: &ContentMetadata, cache: CacheLocation, mirrored: FlowKey) {
        if cache == self.location() {
            self.announced
                .lock()
                .unwrap()
                .insert(mirrored, meta.file_name.clone());
        }
    }
}

pub struct Maintenance {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Drop for Maintenance {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            h.thread().unpark();
            let _ = h.join();
        }
    }
}

/// Address to advertise when the serve endpoint binds a wildcard.
pub fn advertised_ip(bound: Ipv4Addr) -> Ipv4Addr {
    if bound.is_unspecified() {
        Ipv4Addr::LOCALHOST
    } else {
        bound
    }
}

#[cfg(test)]
mod tests;
