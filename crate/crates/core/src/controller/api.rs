//! HTTP/JSON API in front of a [`SharedController`].

use std::net::{Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use log::{debug, warn};
use percent_encoding::percent_decode_str;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tiny_http::{Header, Method, Request, Response, Server};

use super::client::{ConfirmBody, PendingBody, SessionBody, StatsReport};
use super::{ContentMetadata, ControllerError, SessionId, SharedController, StorageCapability};

/// A running API server. Dropping it stops the workers.
pub struct ControllerServer {
    server: Arc<Server>,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl ControllerServer {
    pub fn spawn(
        controller: SharedController,
        listen: &str,
        workers: usize,
    ) -> std::io::Result<Self> {
        let server = Server::http(listen).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("controller API needs an IP listener"))?;
        let server = Arc::new(server);
        let stop = Arc::new(AtomicBool::new(false));
        let workers = (0..workers.max(1))
            .map(|i| {
                let server = Arc::clone(&server);
                let controller = Arc::clone(&controller);
                let stop = Arc::clone(&stop);
                std::thread::Builder::new()
                    .name(format!("controller-api-{i}"))
                    .spawn(move || {
                        while !stop.load(Ordering::SeqCst) {
                            match server.recv() {
                                Ok(req) => handle(&controller, req),
                                Err(e) => {
                                    if !stop.load(Ordering::SeqCst) {
                                        warn!("controller API accept failed: {e}");
                                    }
                                    break;
                                }
                            }
                        }
                    })
                    .expect("spawn API worker")
            })
            .collect();
        Ok(ControllerServer {
            server,
            addr,
            stop,
            workers,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
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

impl Drop for ControllerServer {
    fn drop(&mut self) {
        self.stop_workers();
    }
}

type Reply = Response<std::io::Cursor<Vec<u8>>>;

fn json_reply<T: Serialize>(status: u16, body: &T) -> Reply {
    let bytes = serde_json::to_vec(body).expect("serializable body");
    Response::from_data(bytes)
        .with_status_code(status)
        .with_header(Header::from_bytes("Content-Type", "application/json").unwrap())
}

fn empty(status: u16) -> Reply {
    Response::from_data(Vec::new()).with_status_code(status)
}

fn error(status: u16, message: impl std::fmt::Display) -> Reply {
    json_reply(status, &serde_json::json!({ "error": message.to_string() }))
}

fn controller_error(e: ControllerError) -> Reply {
    let status = match &e {
        ControllerError::InvalidMetadata(_)
        | ControllerError::InvalidCapability(_)
        | ControllerError::CapacityExceeded { .. }
        | ControllerError::Config(_) => 400,
        ControllerError::UnknownSession(_) | ControllerError::NoProvisionalEntry(_) => 404,
        ControllerError::SessionNotActive { .. } | ControllerError::WrongSession { .. } => 409,
        ControllerError::UnknownElement(_) => 422,
        ControllerError::NoFabric | ControllerError::Fabric(_) => 500,
    };
    error(status, e)
}

fn query_param(query: &str, key: &str) -> Option<String> {
    query.split('&').find_map(|pair| {
        let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
        (k == key).then(|| {
            percent_decode_str(&v.replace('+', " "))
                .decode_utf8_lossy()
                .into_owned()
        })
    })
}

fn read_json<T: DeserializeOwned>(req: &mut Request) -> Result<T, Reply> {
    let mut body = Vec::new();
    req.as_reader()
        .read_to_end(&mut body)
        .map_err(|e| error(400, e))?;
    serde_json::from_slice(&body).map_err(|e| error(400, e))
}

fn handle(controller: &SharedController, mut req: Request) {
    let url = req.url().to_string();
    let (path, query) = url.split_once('?').unwrap_or((url.as_str(), ""));
    debug!("{} {}", req.method(), url);
    let reply = route(controller, &mut req, path, query);
    if let Err(e) = req.respond(reply) {
        debug!("client went away before the reply: {e}");
    }
}

fn route(controller: &SharedController, req: &mut Request, path: &str, query: &str) -> Reply {
    let state = || controller.lock().expect("controller lock poisoned");
    match (req.method(), path) {
        (Method::Get, "/content") => {
            let Some(name) = query_param(query, "name") else {
                return error(400, "missing name");
            };
            match state().lookup_content(&name) {
                Some(loc) => json_reply(200, &loc),
                None => empty(404),
            }
        }
        (Method::Post, "/metadata") => match read_json::<ContentMetadata>(req) {
            Ok(meta) => match state().report_metadata(&meta) {
                Ok(outcome) => {
                    debug!("metadata for '{}': {outcome:?}", meta.file_name);
                    empty(204)
                }
                Err(e) => controller_error(e),
            },
            Err(reply) => reply,
        },
        (Method::Get, "/pending") => {
            let Some(ip) = query_param(query, "source_ip").and_then(|s| s.parse::<Ipv4Addr>().ok())
            else {
                return error(400, "missing or invalid source_ip");
            };
            match state().cache_query(ip) {
                Some(file_name) => json_reply(200, &PendingBody { file_name }),
                None => empty(404),
            }
        }
        (Method::Post, "/storage/register") => match read_json::<StorageCapability>(req) {
            Ok(cap) => match state().register_storage(cap) {
                Ok(session_id) => json_reply(200, &SessionBody { session_id }),
                Err(e) => controller_error(e),
            },
            Err(reply) => reply,
        },
        (Method::Post, "/storage/heartbeat") => match read_json::<SessionBody>(req) {
            Ok(body) => match state().heartbeat(body.session_id) {
                Ok(()) => empty(204),
                Err(e) => controller_error(e),
            },
            Err(reply) => reply,
        },
        (Method::Post, "/storage/stats") => match read_json::<StatsReport>(req) {
            Ok(s) => {
                match state().report_stats(s.session_id, s.used_bytes, s.object_count, &s.evicted) {
                    Ok(()) => empty(204),
                    Err(e) => controller_error(e),
                }
            }
            Err(reply) => reply,
        },
        (Method::Post, "/storage/confirm") => match read_json::<ConfirmBody>(req) {
            Ok(body) => match state().confirm_stored(body.session_id, &body.file_name) {
                Ok(()) => empty(204),
                Err(e) => controller_error(e),
            },
            Err(reply) => reply,
        },
        (Method::Delete, p) if p.starts_with("/storage/session/") => {
            let Ok(id) = p["/storage/session/".len()..].parse::<u64>() else {
                return error(400, "invalid session id");
            };
            match state().deregister_storage(SessionId(id)) {
                Ok(()) => empty(204),
                Err(e) => controller_error(e),
            }
        }
        (Method::Get, "/admin/state") => json_reply(200, &state().admin_state()),
        (_, "/content" | "/metadata" | "/pending" | "/admin/state") => empty(405),
        _ => error(404, format!("no route for {path}")),
    }
}
