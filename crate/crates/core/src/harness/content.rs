use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FileSpec, HarnessError};
use crate::http::{content_name, HttpResponse};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub size: u64,
    pub sha256: String,
}

/// Origin content keyed by name.
#[derive(Debug, Clone, Default)]
pub struct ContentSet {
    files: BTreeMap<String, Arc<Vec<u8>>>,
    digests: BTreeMap<String, String>,
}

impl ContentSet {
    pub fn get(&self, name: &str) -> Option<&Arc<Vec<u8>>> {
        self.files.get(name)
    }

    pub fn digest(&self, name: &str) -> Option<&str> {
        self.digests.get(name).map(String::as_str)
    }

    pub fn manifest(&self) -> Vec<FileDigest> {
        self.files
            .iter()
            .map(|(name, body)| FileDigest {
                name: name.clone(),
                size: body.len() as u64,
                sha256: self.digests[name].clone(),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

/// Pseudo-random bytes determined by `(name, seed)` alone.
pub fn file_bytes(spec: &FileSpec) -> Vec<u8> {
    let mut key = Sha256::new();
    key.update(spec.name.as_bytes());
    key.update(spec.seed.to_be_bytes());
    let mut rng = ChaCha8Rng::from_seed(key.finalize().into());
    let mut buf = vec![0u8; spec.size as usize];
    rng.fill_bytes(&mut buf);
    buf
}

pub fn generate_files(manifest: &[FileSpec]) -> Result<ContentSet, HarnessError> {
    let mut set = ContentSet::default();
    for spec in manifest {
        if spec.size == 0 {
            return Err(HarnessError::Invalid(format!(
                "file '{}' has size 0",
                spec.name
            )));
        }
        let body = file_bytes(spec);
        set.digests.insert(spec.name.clone(), sha256_hex(&body));
        set.files.insert(spec.name.clone(), Arc::new(body));
    }
    Ok(set)
}

/// Minimal HTTP/1.1 file server over a [`ContentSet`] that counts the
/// requests it answers per file.
#[derive(Debug, Clone)]
pub struct ScriptedOrigin {
    content: Arc<ContentSet>,
    index_name: String,
    counts: Arc<Mutex<BTreeMap<String, u64>>>,
}

impl ScriptedOrigin {
    pub fn new(content: Arc<ContentSet>, index_name: &str) -> Self {
        ScriptedOrigin {
            content,
            index_name: index_name.to_string(),
            counts: Arc::default(),
        }
    }

    /// Answers a GET for `target`.
    pub fn respond(&self, method: &str, target: &str) -> HttpResponse {
        if method != "GET" {
            return HttpResponse::new(405, Vec::new());
        }
        let name = content_name(target, &self.index_name);
        *self.counts.lock().unwrap().entry(name.clone()).or_default() += 1;
        match self.content.get(&name) {
            Some(body) => HttpResponse::new(200, body.to_vec())
                .with_header("Content-Type", "application/octet-stream"),
            None => HttpResponse::new(404, b"no such file\n".to_vec()),
        }
    }

    /// Parses a raw request head and answers it.
    pub fn respond_raw(&self, request: &[u8]) -> HttpResponse {
        let mut slots = [httparse::EMPTY_HEADER; 64];
        let mut req = httparse::Request::new(&mut slots);
        match req.parse(request) {
            Ok(httparse::Status::Complete(_)) => {
                self.respond(req.method.unwrap_or_default(), req.path.unwrap_or("/"))
            }
            _ => HttpResponse::new(400, Vec::new()),
        }
    }

    pub fn request_count(&self, name: &str) -> u64 {
        self.counts.lock().unwrap().get(name).copied().unwrap_or(0)
    }

    pub fn request_counts(&self) -> BTreeMap<String, u64> {
        self.counts.lock().unwrap().clone()
    }

    /// Serves over real TCP until the handle is dropped.
    pub fn spawn(&self, listen: &str) -> std::io::Result<OriginHandle> {
        let server = Arc::new(tiny_http::Server::http(listen).map_err(std::io::Error::other)?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("origin needs an IP listener"))?;
        let stop = Arc::new(AtomicBool::new(false));
        let worker = {
            let (server, stop, origin) = (Arc::clone(&server), Arc::clone(&stop), self.clone());
            std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let Ok(req) = server.recv() else { break };
                    let resp = origin.respond(req.method().as_str(), req.url());
                    // Content-Length framing only; the cache does not store chunked bodies.
                    let mut reply = tiny_http::Response::from_data(resp.body)
                        .with_status_code(resp.status)
                        .with_chunked_threshold(usize::MAX);
                    if let Some(ct) = resp.headers.iter().find(|(k, _)| k == "Content-Type") {
                        reply.add_header(
                            tiny_http::Header::from_bytes("Content-Type", ct.1.as_bytes()).unwrap(),
                        );
                    }
                    let _ = req.respond(reply);
                }
            })
        };
        Ok(OriginHandle {
            server,
            addr,
            stop,
            worker: Some(worker),
        })
    }
}

pub struct OriginHandle {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    worker: Option<JoinHandle<()>>,
}

impl OriginHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for OriginHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
