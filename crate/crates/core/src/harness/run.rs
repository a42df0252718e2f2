use std::collections::BTreeMap;
use std::io;
use std::net::{SocketAddrV4, TcpListener};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::content::{generate_files, sha256_hex, ScriptedOrigin};
use super::report::{Aggregates, ConfigEcho, Report, RequestRecord, ServedBy};
use super::{HarnessError, Scenario};
use crate::cache::{extract_body, Cache, CacheConfig, Reassembler, SegmentOutcome, TcpSegment};
use crate::clock::{Clock, ManualClock};
use crate::controller::{Controller, ControllerClient, ControllerServer, HttpControllerClient};
use crate::fabric::{DeliveryTrace, Fabric, Latency, NodeId, Packet, SharedFabric, TcpFlags};
use crate::flow::FlowKey;
use crate::http::get_request;
use crate::proxy::{decide, parse_get, ProxyDecision};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run without a reachable controller API; the fabric keeps the
    /// routes installed at startup.
    pub controller_down: bool,
    /// Return every delivery trace alongside the report.
    pub keep_traces: bool,
}

pub struct RunOutput {
    pub report: Report,
    pub traces: Vec<DeliveryTrace>,
}

pub fn run_scenario(scenario: &Scenario) -> Result<Report, HarnessError> {
    Ok(run_scenario_with(scenario, &RunOptions::default())?.report)
}

/// Hashes serialized traces without buffering them.
struct HashWriter<'a>(&'a mut Sha256);

impl io::Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Data-plane state of one run.
struct Net {
    fabric: SharedFabric,
    mtu: usize,
    clock: ManualClock,
    caches: BTreeMap<NodeId, Arc<Cache>>,
    trace_hash: Sha256,
    traces: Option<Vec<DeliveryTrace>>,
    packets: u64,
}

/// Failure of one leg, before the request context is attached.
struct LegError(String);

impl From<crate::fabric::FabricError> for LegError {
    fn from(e: crate::fabric::FabricError) -> Self {
        LegError(e.to_string())
    }
}

fn to_segment(p: &Packet) -> TcpSegment {
    let mut seg = TcpSegment::new(p.flow, p.seq, p.payload.clone(), p.flags.fin);
    seg.syn = p.flags.syn;
    seg
}

impl Net {
    /// Injects one packet, hands mirrored copies to caches, and returns
    /// the primary delivery's latency if it reached `expect`.
    fn send(
        &mut self,
        from: &NodeId,
        packet: Packet,
        expect: &NodeId,
    ) -> Result<(Latency, Packet), LegError> {
        let trace = self.fabric.lock().unwrap().inject_packet(from, packet)?;
        self.packets += 1;
        serde_json::to_writer(HashWriter(&mut self.trace_hash), &trace)
            .map_err(|e| LegError(e.to_string()))?;
        self.trace_hash.update(b"\n");

        for d in trace.deliveries.iter().filter(|d| d.copy != 0) {
            if let Some(cache) = self.caches.get(&d.host) {
                cache.observe_segment(&to_segment(&d.packet));
            }
        }
        let result = match trace.primary() {
            Some(d) if &d.host == expect => Ok((d.latency, d.packet.clone())),
            Some(d) => Err(LegError(format!(
                "delivered to {} instead of {expect}",
                d.host
            ))),
            None => Err(LegError(format!(
                "dropped before reaching {expect}: {:?}",
                trace.hops.last()
            ))),
        };
        if let Some(t) = self.traces.as_mut() {
            t.push(trace);
        }
        result
    }

    /// SYN from `client`, SYN-ACK back. The receiver of the SYN-ACK gets
    /// it in `rx` to anchor its reassembly.
    fn handshake(
        &mut self,
        client: &NodeId,
        server: &NodeId,
        flow: FlowKey,
        isn_client: u32,
        isn_server: u32,
        rx: &mut Reassembler,
    ) -> Result<Latency, LegError> {
        let syn = TcpFlags {
            syn: true,
            ..TcpFlags::default()
        };
        let (a, _) = self.send(
            client,
            Packet::tcp(flow, isn_client, syn, Vec::new()),
            server,
        )?;
        let syn_ack = TcpFlags { ack: true, ..syn };
        let (b, delivered) = self.send(
            server,
            Packet::tcp(flow.reversed(), isn_server, syn_ack, Vec::new()),
            client,
        )?;
        rx.observe_segment(&to_segment(&delivered), self.clock.now());
        Ok(a + b)
    }

    /// Sends `bytes` as MTU-sized segments starting at `seq`. Returns the
    /// latest arrival and the payloads as delivered.
    fn transfer(
        &mut self,
        from: &NodeId,
        to: &NodeId,
        flow: FlowKey,
        seq: u32,
        bytes: &[u8],
        fin: bool,
    ) -> Result<(Latency, Vec<Packet>), LegError> {
        let chunks: Vec<&[u8]> = if bytes.is_empty() {
            vec![&[]]
        } else {
            bytes.chunks(self.mtu).collect()
        };
        let n = chunks.len();
        let mut latest = Latency::ZERO;
        let mut delivered = Vec::with_capacity(n);
        let mut offset = 0u32;
        for (i, chunk) in chunks.into_iter().enumerate() {
            let flags = if fin && i + 1 == n {
                TcpFlags::FIN_ACK
            } else {
                TcpFlags::ACK
            };
            let packet = Packet::tcp(flow, seq.wrapping_add(offset), flags, chunk.to_vec());
            offset = offset.wrapping_add(chunk.len() as u32);
            let (lat, p) = self.send(from, packet, to)?;
            latest = latest.max(lat);
            delivered.push(p);
        }
        Ok((latest, delivered))
    }

    fn advance(&self, by: Latency) {
        self.clock.advance(Duration::from_micros(by.as_micros()));
    }
}

/// Drives the request script through the assembled system on a virtual
/// clock. Link latencies come from the fabric; the controller API and
/// the proxy's decision logic run for real over loopback HTTP.
pub fn run_scenario_with(
    scenario: &Scenario,
    options: &RunOptions,
) -> Result<RunOutput, HarnessError> {
    scenario.validate()?;
    let cfg = &scenario.config;
    let topology = scenario.topology()?;
    let content = Arc::new(generate_files(&scenario.files)?);
    let origin = ScriptedOrigin::new(Arc::clone(&content), &cfg.index_name);

    let host_id = |id: &str| NodeId::new(id);
    let ip_of = |id: &NodeId| topology.host(id).expect("validated host").ip;
    let proxy = host_id(&scenario.roles.proxy);
    let origin_host = host_id(&scenario.roles.origin);
    let proxy_ip = ip_of(&proxy);
    let origin_addr = SocketAddrV4::new(ip_of(&origin_host), cfg.origin_port);

    let clock = ManualClock::new();
    let fabric = Fabric::new(topology.clone())
        .with_mtu(cfg.mtu)
        .into_shared();
    let mut controller_cfg = cfg.controller.clone();
    controller_cfg.http_port = cfg.origin_port;
    controller_cfg.listen = "127.0.0.1:0".into();
    let mut controller = Controller::new(controller_cfg.clone())
        .with_clock(Arc::new(clock.clone()))
        .with_fabric(Arc::clone(&fabric));
    controller.install_base_routes()?;
    let mut client_switches: Vec<NodeId> = scenario
        .requests
        .iter()
        .map(|r| {
            topology
                .host(&host_id(&r.client))
                .expect("validated")
                .switch
                .clone()
        })
        .collect();
    client_switches.sort();
    client_switches.dedup();
    for sw in &client_switches {
        controller.install_nat_rules(sw, &proxy)?;
    }
    let controller = controller.into_shared();

    let (_server, controller_url) = if options.controller_down {
        // A port that was just free: connections are refused.
        let port = TcpListener::bind("127.0.0.1:0")?.local_addr()?.port();
        (None, format!("http://127.0.0.1:{port}"))
    } else {
        let server = ControllerServer::spawn(
            Arc::clone(&controller),
            &controller_cfg.listen,
            controller_cfg.api_workers,
        )?;
        let url = server.url();
        (Some(server), url)
    };
    let client: Arc<dyn ControllerClient> = Arc::new(HttpControllerClient::with_timeout(
        &controller_url,
        Duration::from_secs(2),
    ));

    let mut work_dirs = Vec::new();
    let mut caches = BTreeMap::new();
    for id in &scenario.roles.caches {
        let host = host_id(id);
        let dir = tempfile::tempdir()?;
        let config = CacheConfig::new(
            SocketAddrV4::new(ip_of(&host), cfg.cache_port),
            cfg.cache_capacity_bytes,
            dir.path(),
        );
        let cache = Arc::new(Cache::open(
            config,
            Arc::clone(&client),
            Arc::new(clock.clone()),
        )?);
        match cache.register() {
            Ok(id) => debug!("cache {host} registered as session {id}"),
            Err(e) if options.controller_down => debug!("cache {host} unregistered: {e}"),
            Err(e) => return Err(e.into()),
        }
        work_dirs.push(dir);
        caches.insert(host, cache);
    }

    let mut net = Net {
        fabric,
        mtu: cfg.mtu,
        clock: clock.clone(),
        caches,
        trace_hash: Sha256::new(),
        traces: options.keep_traces.then(Vec::new),
        packets: 0,
    };
    let heartbeat_every = Duration::from_millis(controller_cfg.heartbeat_interval_ms.max(1));
    let mut next_heartbeat = heartbeat_every;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut records = Vec::with_capacity(scenario.requests.len());

    for (index, req) in scenario.ordered_requests() {
        let start = Duration::from_millis(req.at_ms).max(clock.now());
        while next_heartbeat <= start {
            clock.advance_to(next_heartbeat);
            for (host, cache) in &net.caches {
                if let Err(e) = cache.heartbeat().and_then(|_| cache.report_stats()) {
                    if !options.controller_down {
                        warn!("heartbeat from {host} failed: {e}");
                    }
                }
            }
            next_heartbeat += heartbeat_every;
        }
        clock.advance_to(start);

        let fail = |leg: &str, e: LegError| HarnessError::Undelivered {
            index,
            file: req.file.clone(),
            leg: leg.to_string(),
            detail: e.0,
        };
        let client_host = host_id(&req.client);
        let client_ip = ip_of(&client_host);
        let client_flow = FlowKey::new(
            SocketAddrV4::new(client_ip, 40_000 + (index % 20_000) as u16),
            origin_addr,
        );
        let upstream_src = SocketAddrV4::new(proxy_ip, 20_000 + (index % 20_000) as u16);
        let [isn_c, isn_s, isn_p, isn_t]: [u32; 4] = rng.gen();
        let mut total = Latency::ZERO;
        let mut processing = Duration::ZERO;
        let mut client_rx = Reassembler::default();
        let mut proxy_rx = Reassembler::default();

        // Client connects to the origin; the fabric steers it to the proxy.
        let lat = net
            .handshake(
                &client_host,
                &proxy,
                client_flow,
                isn_c,
                isn_s,
                &mut client_rx,
            )
            .map_err(|e| fail("client handshake", e))?;
        net.advance(lat);
        total += lat;
        let request = get_request(&format!("/{}", req.file), &origin_addr.ip().to_string());
        let (lat, delivered) = net
            .transfer(
                &client_host,
                &proxy,
                client_flow,
                isn_c.wrapping_add(1),
                &request,
                false,
            )
            .map_err(|e| fail("client request", e))?;
        net.advance(lat);
        total += lat;

        let t = Instant::now();
        let raw: Vec<u8> = delivered
            .iter()
            .flat_map(|p| p.payload.iter().copied())
            .collect();
        let original_dst = delivered[0].flow.dst();
        let parsed = parse_get(&raw, original_dst, &cfg.index_name)
            .map_err(|e| fail("proxy parse", LegError(e.to_string())))?;
        let decision = decide(&parsed, client.as_ref(), upstream_src);
        processing += t.elapsed();

        let (target, served_by) = match decision {
            ProxyDecision::Redirect(addr) => (addr, ServedBy::Cache),
            ProxyDecision::Passthrough(addr) => (addr, ServedBy::Origin),
            ProxyDecision::NoProxy => unreachable!("scripted requests are GETs"),
        };
        let target_host = topology
            .host_by_ip(*target.ip())
            .cloned()
            .ok_or_else(|| fail("proxy connect", LegError(format!("no host owns {target}"))))?;
        let upstream_flow = FlowKey::new(upstream_src, target);
        let lat = net
            .handshake(
                &proxy,
                &target_host,
                upstream_flow,
                isn_p,
                isn_t,
                &mut proxy_rx,
            )
            .map_err(|e| fail("upstream handshake", e))?;
        net.advance(lat);
        total += lat;
        let upstream_request = parsed.upstream_bytes(served_by == ServedBy::Cache);
        let (lat, delivered) = net
            .transfer(
                &proxy,
                &target_host,
                upstream_flow,
                isn_p.wrapping_add(1),
                &upstream_request,
                false,
            )
            .map_err(|e| fail("upstream request", e))?;
        net.advance(lat);
        total += lat;

        let t = Instant::now();
        let raw: Vec<u8> = delivered
            .iter()
            .flat_map(|p| p.payload.iter().copied())
            .collect();
        let response = match served_by {
            ServedBy::Origin => origin.respond_raw(&raw),
            ServedBy::Cache => {
                let name = parse_get(&raw, target, &cfg.index_name)
                    .map_err(|e| fail("cache parse", LegError(e.to_string())))?
                    .file_name;
                net.caches
                    .get(&target_host)
                    .ok_or_else(|| {
                        fail(
                            "cache serve",
                            LegError(format!("{target_host} runs no cache")),
                        )
                    })?
                    .serve(&name)
            }
        }
        .to_bytes();
        processing += t.elapsed();

        let (lat, delivered) = net
            .transfer(
                &target_host,
                &proxy,
                upstream_flow.reversed(),
                isn_t.wrapping_add(1),
                &response,
                true,
            )
            .map_err(|e| fail("response", e))?;
        net.advance(lat);
        total += lat;
        let stream = reassemble_all(&mut proxy_rx, &delivered, clock.now())
            .map_err(|e| fail("proxy reassembly", e))?;

        // Relayed to the client as if from the origin.
        let (lat, delivered) = net
            .transfer(
                &proxy,
                &client_host,
                client_flow.reversed(),
                isn_s.wrapping_add(1),
                &stream,
                true,
            )
            .map_err(|e| fail("relay", e))?;
        net.advance(lat);
        total += lat;
        let stream = reassemble_all(&mut client_rx, &delivered, clock.now())
            .map_err(|e| fail("client reassembly", e))?;

        let body =
            extract_body(&stream).map_err(|e| fail("client parse", LegError(e.to_string())))?;
        let got = sha256_hex(&body.body);
        let expected = content.digest(&req.file).expect("validated manifest");
        if body.status != 200 || got != expected {
            return Err(HarnessError::DigestMismatch {
                index,
                file: req.file.clone(),
                expected: expected.to_string(),
                got: format!("status {} sha256 {got}", body.status),
            });
        }
        let end = clock.now();
        debug!(
            "request {index} '{}' via {served_by:?}: {:.3} ms",
            req.file,
            total.as_millis_f64()
        );
        records.push(RequestRecord {
            index,
            file: req.file.clone(),
            client: req.client.clone(),
            served_by,
            cache: (served_by == ServedBy::Cache).then(|| target_host.to_string()),
            bytes: body.body.len() as u64,
            sha256: got,
            start_ms: start.as_secs_f64() * 1e3,
            end_ms: end.as_secs_f64() * 1e3,
            simulated_latency_ms: total.as_millis_f64(),
            processing_ms: processing.as_secs_f64() * 1e3,
        });
    }

    let report = Report {
        config: ConfigEcho {
            scenario: scenario.name.clone(),
            seed: scenario.seed,
            controller_available: !options.controller_down,
            proxy: scenario.roles.proxy.clone(),
            caches: scenario.roles.caches.clone(),
            origin: scenario.roles.origin.clone(),
            config: scenario.config.clone(),
        },
        files: content.manifest(),
        aggregates: Aggregates::from_records(&records, origin.request_counts()),
        records,
        trace_digest: hex::encode(net.trace_hash.clone().finalize()),
        packets_injected: net.packets,
    };
    info!(
        "scenario '{}': {} hits, {} misses, {} packets",
        scenario.name, report.aggregates.hits, report.aggregates.misses, report.packets_injected
    );
    Ok(RunOutput {
        report,
        traces: net.traces.take().unwrap_or_default(),
    })
}

/// Feeds delivered segments to `rx`; the last must complete the stream.
fn reassemble_all(
    rx: &mut Reassembler,
    delivered: &[Packet],
    now: Duration,
) -> Result<Vec<u8>, LegError> {
    let mut out = None;
    for p in delivered {
        match rx.observe_segment(&to_segment(p), now) {
            SegmentOutcome::Complete(stream) => out = Some(stream),
            SegmentOutcome::Dropped(e) => return Err(LegError(e.to_string())),
            SegmentOutcome::Buffered | SegmentOutcome::Unanchored => {}
        }
    }
    out.ok_or_else(|| LegError("stream incomplete after FIN".into()))
}
