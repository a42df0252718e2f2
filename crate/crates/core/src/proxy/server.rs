use std::io::{self, Write};
use std::net::{
    Ipv4Addr, Shutdown, SocketAddr, SocketAddrV4, TcpListener, TcpStream, ToSocketAddrs, UdpSocket,
};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use socket2::{Domain, Protocol, Socket, Type};

use super::{decide, parse_get, ParseError, ProxyDecision};
use crate::controller::ControllerClient;
use crate::http::{read_head, HeadRead, HttpResponse, MAX_HEAD_BYTES};

/// How the proxy learns where an intercepted connection was headed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OriginResolver {
    /// Resolve the `Host` header, defaulting to `default_port`.
    HostHeader { default_port: u16 },
    /// Every connection was headed to this address.
    Fixed(SocketAddrV4),
}

impl OriginResolver {
    fn resolve(&self, host: Option<&str>) -> Option<SocketAddrV4> {
        match self {
            OriginResolver::Fixed(addr) => Some(*addr),
            OriginResolver::HostHeader { default_port } => {
                let host = host?;
                let with_port = if host
                    .rsplit_once(':')
                    .is_some_and(|(_, p)| p.parse::<u16>().is_ok())
                {
                    host.to_string()
                } else {
                    format!("{host}:{default_port}")
                };
                with_port.to_socket_addrs().ok()?.find_map(|a| match a {
                    SocketAddr::V4(v4) => Some(v4),
                    SocketAddr::V6(_) => None,
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub listen: String,
    pub index_name: String,
    pub origin: OriginResolver,
    pub connect_timeout: Duration,
    /// Idle limit while waiting for the client's request head.
    pub head_timeout: Duration,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            listen: "0.0.0.0:3128".into(),
            index_name: "index.html".into(),
            origin: OriginResolver::HostHeader { default_port: 80 },
            connect_timeout: Duration::from_secs(5),
            head_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Default)]
pub struct ProxyStats {
    pub connections: AtomicU64,
    pub redirects: AtomicU64,
    pub passthroughs: AtomicU64,
    pub tunnels: AtomicU64,
    pub rejected: AtomicU64,
    pub upstream_failures: AtomicU64,
}

impl ProxyStats {
    fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(counter: &AtomicU64) -> u64 {
        counter.load(Ordering::Relaxed)
    }
}

/// Byte counts for one relayed connection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TransferSummary {
    pub to_upstream: u64,
    pub to_client: u64,
    pub elapsed: Duration,
}

/// Shuttles bytes both ways until each side has closed its half. A
/// transport error on either side tears down both connections.
pub fn relay(client: TcpStream, upstream: TcpStream) -> io::Result<TransferSummary> {
    let started = Instant::now();
    let mut client_rd = client.try_clone()?;
    let mut upstream_wr = upstream.try_clone()?;
    let up = std::thread::spawn(move || {
        let r = io::copy(&mut client_rd, &mut upstream_wr);
        match r {
            Ok(_) => {
                let _ = upstream_wr.shutdown(Shutdown::Write);
            }
            Err(_) => {
                let _ = upstream_wr.shutdown(Shutdown::Both);
                let _ = client_rd.shutdown(Shutdown::Both);
            }
        }
        r
    });
    let mut upstream_rd = upstream;
    let mut client_wr = client;
    let down = io::copy(&mut upstream_rd, &mut client_wr);
    match &down {
        Ok(_) => {
            let _ = client_wr.shutdown(Shutdown::Write);
        }
        Err(_) => {
            let _ = client_wr.shutdown(Shutdown::Both);
            let _ = upstream_rd.shutdown(Shutdown::Both);
        }
    }
    let up = up
        .join()
        .map_err(|_| io::Error::other("relay thread panicked"))?;
    Ok(TransferSummary {
        to_upstream: up?,
        to_client: down?,
        elapsed: started.elapsed(),
    })
}

/// A running proxy. Dropping it stops accepting; in-flight connections
/// finish on their own threads.
pub struct ProxyServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    stats: Arc<ProxyStats>,
    acceptor: Option<JoinHandle<()>>,
}

impl ProxyServer {
    pub fn spawn(config: ProxyConfig, controller: Arc<dyn ControllerClient>) -> io::Result<Self> {
        let listener = TcpListener::bind(&config.listen)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(ProxyStats::default());
        let config = Arc::new(config);
        let acceptor = {
            let stop = Arc::clone(&stop);
            let stats = Arc::clone(&stats);
            std::thread::Builder::new()
                .name("proxy-accept".into())
                .spawn(move || {
                    for conn in listener.incoming() {
                        if stop.load(Ordering::SeqCst) {
                            break;
                        }
                        let stream = match conn {
                            Ok(s) => s,
                            Err(e) => {
                                warn!("accept failed: {e}");
                                continue;
                            }
                        };
                        ProxyStats::bump(&stats.connections);
                        let (config, controller, stats) = (
                            Arc::clone(&config),
                            Arc::clone(&controller),
                            Arc::clone(&stats),
                        );
                        let spawned = std::thread::Builder::new().name("proxy-conn".into()).spawn(
                            move || {
                                let peer = stream.peer_addr().ok();
                                if let Err(e) =
                                    handle_connection(stream, &config, controller.as_ref(), &stats)
                                {
                                    debug!("connection from {peer:?} ended with error: {e}");
                                }
                            },
                        );
                        if let Err(e) = spawned {
                            warn!("could not spawn connection thread: {e}");
                        }
                    }
                })?
        };
        info!("proxy listening on {addr}");
        Ok(ProxyServer {
            addr,
            stop,
            stats,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &ProxyStats {
        &self.stats
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(Ipv4Addr::LOCALHOST.into());
        }
        let _ = TcpStream::connect_timeout(&wake, Duration::from_secs(1));
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ProxyServer {
    fn drop(&mut self) {
        self.stop_accepting();
    }
}

fn reply(mut client: &TcpStream, status: u16, message: &str) -> io::Result<()> {
    let resp = HttpResponse::new(status, format!("{message}\n").into_bytes())
        .with_header("Content-Type", "text/plain");
    client.write_all(&resp.to_bytes())?;
    client.shutdown(Shutdown::Write)
}

/// Local IPv4 address the kernel would use to reach `dst`. No packet is
/// sent.
fn local_ip_towards(dst: SocketAddrV4) -> io::Result<Ipv4Addr> {
    let probe = UdpSocket::bind((Ipv4Addr::UNSPECIFIED, 0))?;
    probe.connect(dst)?;
    match probe.local_addr()? {
        SocketAddr::V4(a) => Ok(*a.ip()),
        SocketAddr::V6(_) => Err(io::Error::other("no IPv4 route")),
    }
}

/// A socket bound to a concrete source address, so the upstream
/// five-tuple is known before connecting.
fn bound_upstream_socket(towards: SocketAddrV4) -> io::Result<(Socket, SocketAddrV4)> {
    let ip = local_ip_towards(towards)?;
    let socket = Socket::new(Domain::IPV4, Type::STREAM, Some(Protocol::TCP))?;
    socket.bind(&SocketAddr::from(SocketAddrV4::new(ip, 0)).into())?;
    let local = socket
        .local_addr()?
        .as_socket_ipv4()
        .ok_or_else(|| io::Error::other("bound to a non-IPv4 address"))?;
    Ok((socket, local))
}

fn handle_connection(
    client: TcpStream,
    config: &ProxyConfig,
    controller: &dyn ControllerClient,
    stats: &ProxyStats,
) -> io::Result<()> {
    client.set_read_timeout(Some(config.head_timeout))?;
    let (buf, _) = match read_head(&mut &client, MAX_HEAD_BYTES)? {
        HeadRead::Complete { buf, head_len } => (buf, head_len),
        HeadRead::TooLarge => {
            ProxyStats::bump(&stats.rejected);
            return reply(&client, 431, "request header fields too large");
        }
        HeadRead::Eof(_) => return Ok(()),
    };
    client.set_read_timeout(None)?;

    let placeholder = SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0);
    let mut parsed = match parse_get(&buf, placeholder, &config.index_name) {
        Ok(p) => p,
        Err(ParseError::HeadTooLarge) => {
            ProxyStats::bump(&stats.rejected);
            return reply(&client, 431, "request header fields too large");
        }
        Err(e) => {
            ProxyStats::bump(&stats.rejected);
            return reply(&client, 400, &e.to_string());
        }
    };
    let Some(origin) = config.origin.resolve(parsed.host.as_deref()) else {
        ProxyStats::bump(&stats.rejected);
        return reply(&client, 400, "cannot determine destination");
    };
    parsed.original_dst = origin;

    let (socket, upstream_src) = match bound_upstream_socket(origin) {
        Ok(s) => s,
        Err(e) => {
            ProxyStats::bump(&stats.upstream_failures);
            return reply(&client, 502, &format!("no route to {origin}: {e}"));
        }
    };
    let decision = decide(&parsed, controller, upstream_src);
    let (target, request) = match decision {
        ProxyDecision::Redirect(cache) => {
            ProxyStats::bump(&stats.redirects);
            (cache, parsed.upstream_bytes(true))
        }
        ProxyDecision::Passthrough(dst) => {
            ProxyStats::bump(&stats.passthroughs);
            (dst, parsed.upstream_bytes(false))
        }
        ProxyDecision::NoProxy => {
            ProxyStats::bump(&stats.tunnels);
            (origin, parsed.raw.clone())
        }
    };
    debug!("'{}' from {upstream_src}: {decision:?}", parsed.file_name);

    if let Err(e) = socket.connect_timeout(&SocketAddr::from(target).into(), config.connect_timeout)
    {
        ProxyStats::bump(&stats.upstream_failures);
        return reply(&client, 502, &format!("upstream {target} unreachable: {e}"));
    }
    let mut upstream: TcpStream = socket.into();
    upstream.write_all(&request)?;
    let summary = relay(client, upstream)?;
    debug!(
        "'{}' done: {} bytes to client in {:?}",
        parsed.file_name, summary.to_client, summary.elapsed
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn host_header_resolution() {
        let r = OriginResolver::HostHeader { default_port: 80 };
        assert_eq!(
            r.resolve(Some("127.0.0.1")),
            Some("127.0.0.1:80".parse().unwrap())
        );
        assert_eq!(
            r.resolve(Some("127.0.0.1:8080")),
            Some("127.0.0.1:8080".parse().unwrap())
        );
        assert_eq!(r.resolve(None), None);
        let fixed = OriginResolver::Fixed("10.0.0.4:80".parse().unwrap());
        assert_eq!(fixed.resolve(None), Some("10.0.0.4:80".parse().unwrap()));
    }

    #[test]
    fn upstream_socket_has_concrete_source() {
        let (_s, local) = bound_upstream_socket("127.0.0.1:9".parse().unwrap()).unwrap();
        assert_eq!(*local.ip(), Ipv4Addr::LOCALHOST);
        assert_ne!(local.port(), 0);
    }
}
