use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use log::{debug, warn};
use tiny_http::{Header, Method, Request, Response, Server};

use super::Cache;

/// HTTP endpoint serving `GET /<file-name>` from a [`Cache`].
pub struct CacheServer {
    server: Arc<Server>,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl CacheServer {
    pub fn spawn(cache: Arc<Cache>, listen: &str, workers: usize) -> std::io::Result<Self> {
        let server = Server::http(listen).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("cache needs an IP listener"))?;
        let server = Arc::new(server);
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..workers.max(1))
            .map(|i| {
                let (server, cache, stop) =
                    (Arc::clone(&server), Arc::clone(&cache), Arc::clone(&stop));
                std::thread::Builder::new()
                    .name(format!("cache-serve-{i}"))
                    .spawn(move || {
                        while !stop.load(Ordering::SeqCst) {
                            match server.recv() {
                                Ok(req) => handle(&cache, req),
                                Err(e) => {
                                    if !stop.load(Ordering::SeqCst) {
                                        warn!("cache accept failed: {e}");
                                    }
                                    break;
                                }
                            }
                        }
                    })
                    .expect("spawn cache worker")
            })
            .collect();
        Ok(CacheServer {
            server,
            addr,
            stop,
            workers,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_workers();
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for CacheServer {
    fn drop(&mut self) {
        self.stop_workers();
    }
}

fn handle(cache: &Cache, req: Request) {
    // Names are matched exactly as the proxy saw them, undecoded.
    let name = req.url().strip_prefix('/').unwrap_or(req.url()).to_string();
    let reply = if *req.method() == Method::Get {
        let resp = cache.serve(&name);
        let mut r = Response::from_data(resp.body)
            .with_status_code(resp.status)
            .with_chunked_threshold(usize::MAX);
        for (k, v) in resp.headers {
            // tiny_http manages framing headers itself.
            if k.eq_ignore_ascii_case("content-length") || k.eq_ignore_ascii_case("connection") {
                continue;
            }
            if let Ok(h) = Header::from_bytes(k.as_bytes(), v.as_bytes()) {
                r.add_header(h);
            }
        }
        r
    } else {
        Response::from_data(Vec::new()).with_status_code(405)
    };
    debug!("serve '{name}' -> {}", reply.status_code().0);
    if let Err(e) = req.respond(reply) {
        debug!("client went away during serve: {e}");
    }
}
