use std::collections::BTreeSet;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::sync::Arc;
use std::time::Duration;

use super::*;
use crate::clock::ManualClock;
use crate::fabric::{load_topology, Fabric, Packet, TcpFlags};

const LINE: &str = r#"{"switches":["s1","s2","s3"],
    "hosts":[{"id":"client","switch":"s1","ip":"10.0.0.1"},{"id":"proxy","switch":"s1","ip":"10.0.0.2"},
             {"id":"cache","switch":"s2","ip":"10.0.0.3"},{"id":"origin","switch":"s3","ip":"10.0.0.4"}],
    "links":[{"a":"s1","b":"s2","latency_ms":1},{"a":"s2","b":"s3","latency_ms":1},
             {"a":"client","b":"s1","latency_ms":0.1},{"a":"proxy","b":"s1","latency_ms":0.1},
             {"a":"cache","b":"s2","latency_ms":0.1},{"a":"origin","b":"s3","latency_ms":0.1}]}"#;

const CLIENT: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
const PROXY: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);
const CACHE: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 3);
const ORIGIN: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 4);

struct Rig {
    controller: Controller,
    fabric: SharedFabric,
    clock: ManualClock,
}

fn rig() -> Rig {
    let fabric = Fabric::new(load_topology(LINE).unwrap()).into_shared();
    let clock = ManualClock::new();
    let mut controller = Controller::new(ControllerConfig::default())
        .with_clock(Arc::new(clock.clone()))
        .with_fabric(Arc::clone(&fabric));
    controller.install_base_routes().unwrap();
    Rig {
        controller,
        fabric,
        clock,
    }
}

fn cache_cap(capacity: u64) -> StorageCapability {
    StorageCapability::new(SocketAddrV4::new(CACHE, 8080), capacity)
}

fn meta(name: &str) -> ContentMetadata {
    ContentMetadata {
        file_name: name.to_string(),
        dst_ip: ORIGIN,
        dst_port: 80,
        src_ip: PROXY,
        src_port: 40001,
    }
}

fn full_cycle(r: &mut Rig, session: SessionId, name: &str) {
    r.controller.report_metadata(&meta(name)).unwrap();
    assert_eq!(r.controller.cache_query(ORIGIN).as_deref(), Some(name));
    r.controller.confirm_stored(session, name).unwrap();
}

fn rule_count(r: &Rig) -> usize {
    let f = r.fabric.lock().unwrap();
    f.topology()
        .switches()
        .map(|s| f.table(s).unwrap().len())
        .sum()
}

#[test]
fn register_happy_path_and_invalid_capacity() {
    let mut r = rig();
    let id = r.controller.register_storage(cache_cap(100 << 20)).unwrap();
    assert!(r.controller.session(id).unwrap().is_active());
    assert!(matches!(
        r.controller.register_storage(cache_cap(0)),
        Err(ControllerError::InvalidCapability(_))
    ));
    let stranger =
        StorageCapability::new(SocketAddrV4::new(Ipv4Addr::new(192, 168, 1, 1), 8080), 10);
    assert_eq!(
        r.controller.register_storage(stranger),
        Err(ControllerError::UnknownElement(Ipv4Addr::new(
            192, 168, 1, 1
        )))
    );
}

#[test]
fn re_registration_closes_prior_session() {
    let mut r = rig();
    let first = r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    full_cycle(&mut r, first, "a.bin");
    let second = r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    assert_ne!(first, second);
    assert_eq!(
        r.controller.session(first).unwrap().state,
        SessionState::Closed
    );
    assert_eq!(
        r.controller.session(second).unwrap().state,
        SessionState::Active
    );
    assert_eq!(r.controller.lookup_content("a.bin"), None);
}

#[test]
fn heartbeat_keeps_session_and_silence_expires_it() {
    let mut r = rig();
    let id = r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    full_cycle(&mut r, id, "a.bin");
    for _ in 0..10 {
        r.clock.advance(Duration::from_secs(4));
        r.controller.heartbeat(id).unwrap();
    }
    assert!(r.controller.lookup_content("a.bin").is_some());

    r.clock.advance(Duration::from_secs(14));
    assert!(r.controller.lookup_content("a.bin").is_some());
    r.clock.advance(Duration::from_secs(1));
    // Three silent intervals: gone for lookups even before a sweep.
    assert_eq!(r.controller.lookup_content("a.bin"), None);
    assert_eq!(
        r.controller.heartbeat(id),
        Err(ControllerError::SessionNotActive {
            id,
            state: SessionState::Expired
        })
    );
    let state = r.controller.admin_state();
    assert!(state.cache_dictionary.is_empty());
    assert_eq!(state.sessions[0].state, SessionState::Expired);
}

#[test]
fn heartbeat_on_closed_or_unknown_session_fails() {
    let mut r = rig();
    let id = r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    r.controller.deregister_storage(id).unwrap();
    assert!(matches!(
        r.controller.heartbeat(id),
        Err(ControllerError::SessionNotActive { .. })
    ));
    assert_eq!(
        r.controller.heartbeat(SessionId(99)),
        Err(ControllerError::UnknownSession(SessionId(99)))
    );
}

#[test]
fn stats_are_checked_and_read_back() {
    let mut r = rig();
    let id = r.controller.register_storage(cache_cap(100 << 20)).unwrap();
    r.controller.report_stats(id, 10 << 20, 3, &[]).unwrap();
    assert_eq!(
        r.controller.report_stats(id, 200 << 20, 3, &[]),
        Err(ControllerError::CapacityExceeded {
            used: 200 << 20,
            capacity: 100 << 20
        })
    );
    let state = r.controller.admin_state();
    assert_eq!(state.sessions[0].used_bytes, 10 << 20);
    assert_eq!(state.sessions[0].object_count, 3);
}

#[test]
fn evictions_reported_with_stats_purge_entries() {
    let mut r = rig();
    let id = r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    full_cycle(&mut r, id, "a.bin");
    r.controller
        .report_stats(id, 0, 0, &["a.bin".to_string()])
        .unwrap();
    assert_eq!(r.controller.lookup_content("a.bin"), None);
}

#[test]
fn deregister_purges_and_is_not_repeatable() {
    let mut r = rig();
    let id = r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    full_cycle(&mut r, id, "a.bin");
    assert!(r.controller.lookup_content("a.bin").is_some());
    r.controller.deregister_storage(id).unwrap();
    assert_eq!(r.controller.lookup_content("a.bin"), None);
    assert!(matches!(
        r.controller.deregister_storage(id),
        Err(ControllerError::SessionNotActive { .. })
    ));

    let other = r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    r.controller.deregister_storage(other).unwrap();
    assert_eq!(
        r.controller.session(other).unwrap().state,
        SessionState::Closed
    );
}

#[test]
fn lookup_cases() {
    let mut r = rig();
    assert_eq!(r.controller.lookup_content("a.bin"), None);
    let id = r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    r.controller.report_metadata(&meta("a.bin")).unwrap();
    // Provisional entries do not redirect.
    assert_eq!(r.controller.lookup_content("a.bin"), None);
    r.controller.cache_query(ORIGIN);
    r.controller.confirm_stored(id, "a.bin").unwrap();
    assert_eq!(
        r.controller.lookup_content("a.bin"),
        Some(CacheLocation {
            ip: CACHE,
            port: 8080
        })
    );
}

#[test]
fn metadata_installs_fork_and_records_pending() {
    let mut r = rig();
    r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    let before = rule_count(&r);
    let outcome = r.controller.report_metadata(&meta("b.bin")).unwrap();
    assert!(matches!(outcome, MetadataOutcome::Forked { ref switch, .. } if *switch == "s2"));
    assert_eq!(rule_count(&r), before + 1);
    let state = r.controller.admin_state();
    assert_eq!(state.request_dictionary[&ORIGIN].file_name, "b.bin");
    assert!(!state.cache_dictionary["b.bin"].authoritative);

    // The response direction is now mirrored to the cache.
    let response = meta("b.bin").response_flow();
    let trace = r
        .fabric
        .lock()
        .unwrap()
        .inject_packet(
            &"origin".into(),
            Packet::tcp(response, 1, TcpFlags::ACK, b"x".to_vec()),
        )
        .unwrap();
    assert_eq!(
        trace.delivered_to,
        BTreeSet::from([NodeId::new("cache"), NodeId::new("proxy")])
    );
    let copy = trace.delivered_at(&"cache".into()).next().unwrap();
    assert_eq!(copy.packet.flow.src_ip, ORIGIN);
}

#[test]
fn metadata_idempotent_for_cached_names() {
    let mut r = rig();
    let id = r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    full_cycle(&mut r, id, "a.bin");
    let rules = rule_count(&r);
    let before = r.controller.admin_state();
    assert_eq!(
        r.controller.report_metadata(&meta("a.bin")).unwrap(),
        MetadataOutcome::AlreadyCached
    );
    assert_eq!(rule_count(&r), rules);
    assert_eq!(r.controller.admin_state(), before);
}

#[test]
fn metadata_validation_and_degenerate_cases() {
    let mut r = rig();
    assert!(matches!(
        r.controller.report_metadata(&meta("")),
        Err(ControllerError::InvalidMetadata(_))
    ));
    let mut bad_port = meta("a");
    bad_port.src_port = 0;
    assert!(r.controller.report_metadata(&bad_port).is_err());
    assert_eq!(
        r.controller.report_metadata(&meta("a.bin")).unwrap(),
        MetadataOutcome::NoStorage
    );
    assert!(r.controller.admin_state().request_dictionary.is_empty());

    r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    let mut foreign = meta("x");
    foreign.dst_ip = Ipv4Addr::new(1, 2, 3, 4);
    assert_eq!(
        r.controller.report_metadata(&foreign).unwrap(),
        MetadataOutcome::Unroutable
    );
}

#[test]
fn same_origin_collision_is_first_wins() {
    let mut r = rig();
    r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    r.controller.report_metadata(&meta("first")).unwrap();
    let rules = rule_count(&r);
    assert_eq!(
        r.controller.report_metadata(&meta("second")).unwrap(),
        MetadataOutcome::OriginBusy
    );
    assert_eq!(rule_count(&r), rules);
    assert_eq!(r.controller.cache_query(ORIGIN).as_deref(), Some("first"));
}

#[test]
fn policy_can_decline() {
    let mut r = rig();
    r.controller = std::mem::replace(
        &mut r.controller,
        Controller::new(ControllerConfig::default()),
    )
    .with_policy(Arc::new(|m: &ContentMetadata| {
        !m.file_name.ends_with(".tmp")
    }));
    r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    assert_eq!(
        r.controller.report_metadata(&meta("x.tmp")).unwrap(),
        MetadataOutcome::PolicyDeclined
    );
    assert!(matches!(
        r.controller.report_metadata(&meta("x.bin")).unwrap(),
        MetadataOutcome::Forked { .. }
    ));
}

#[test]
fn cache_query_claims_once_and_expires() {
    let mut r = rig();
    r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    r.controller.report_metadata(&meta("a.bin")).unwrap();
    assert_eq!(r.controller.cache_query(ORIGIN).as_deref(), Some("a.bin"));
    assert_eq!(r.controller.cache_query(ORIGIN), None);
    assert_eq!(r.controller.cache_query(Ipv4Addr::new(9, 9, 9, 9)), None);
}

#[test]
fn expired_pending_entry_is_not_claimable() {
    let mut r = rig();
    let id = r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    r.controller.report_metadata(&meta("c.bin")).unwrap();
    for _ in 0..7 {
        r.clock.advance(Duration::from_secs(4));
        r.controller.heartbeat(id).unwrap();
    }
    r.clock.advance(Duration::from_secs(2));
    assert_eq!(r.controller.cache_query(ORIGIN), None);
}

#[test]
fn pending_ttl_removes_fork_rules() {
    let mut r = rig();
    let id = r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    let base = rule_count(&r);
    r.controller.report_metadata(&meta("a.bin")).unwrap();
    assert!(rule_count(&r) > base);
    for _ in 0..8 {
        r.clock.advance(Duration::from_secs(4));
        r.controller.heartbeat(id).unwrap();
    }
    assert_eq!(rule_count(&r), base);
    assert_eq!(r.controller.cache_query(ORIGIN), None);
    assert!(matches!(
        r.controller.confirm_stored(id, "a.bin"),
        Err(ControllerError::NoProvisionalEntry(_))
    ));
}

#[test]
fn confirm_cases() {
    let mut r = rig();
    let id = r.controller.register_storage(cache_cap(1 << 20)).unwrap();
    let base = rule_count(&r);
    r.controller.report_metadata(&meta("a.bin")).unwrap();
    r.controller.cache_query(ORIGIN);
    assert!(matches!(
        r.controller.confirm_stored(id, "zzz"),
        Err(ControllerError::NoProvisionalEntry(_))
    ));
    assert!(matches!(
        r.controller.confirm_stored(SessionId(77), "a.bin"),
        Err(ControllerError::UnknownSession(_))
    ));
    r.controller.confirm_stored(id, "a.bin").unwrap();
    assert_eq!(rule_count(&r), base);
    assert!(r.controller.lookup_content("a.bin").is_some());
}

#[test]
fn confirm_from_wrong_session() {
    let mut r = rig();
    let topo = r.fabric.lock().unwrap().topology().to_document();
    let mut doc = topo;
    doc.hosts.push(crate::fabric::HostEntry {
        id: "cache2".into(),
        switch: "s3".into(),
        ip: Some(Ipv4Addr::new(10, 0, 0, 9)),
    });
    doc.links.push(crate::fabric::LinkEntry {
        a: "cache2".into(),
        b: "s3".into(),
        latency_ms: 5.0,
    });
    let fabric = Fabric::new(crate::fabric::Topology::from_document(&doc).unwrap()).into_shared();
    let mut c = Controller::new(ControllerConfig::default())
        .with_clock(Arc::new(r.clock.clone()))
        .with_fabric(fabric);
    c.install_base_routes().unwrap();
    let near = c.register_storage(cache_cap(1 << 20)).unwrap();
    let far = c
        .register_storage(StorageCapability::new(
            SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 9), 8080),
            1 << 20,
        ))
        .unwrap();
    // The cache one hop from its fork point wins over the slower link.
    assert!(matches!(
        c.report_metadata(&meta("a.bin")).unwrap(),
        MetadataOutcome::Forked { session, .. } if session == near
    ));
    assert!(matches!(
        c.confirm_stored(far, "a.bin"),
        Err(ControllerError::WrongSession { .. })
    ));
    r.controller = c;
}

#[test]
fn full_cache_falls_back_to_next_candidate() {
    let r = rig();
    let mut doc = r.fabric.lock().unwrap().topology().to_document();
    doc.hosts.push(crate::fabric::HostEntry {
        id: "cache2".into(),
        switch: "s3".into(),
        ip: Some(Ipv4Addr::new(10, 0, 0, 9)),
    });
    doc.links.push(crate::fabric::LinkEntry {
        a: "cache2".into(),
        b: "s3".into(),
        latency_ms: 5.0,
    });
    let fabric = Fabric::new(crate::fabric::Topology::from_document(&doc).unwrap()).into_shared();
    let mut c = Controller::new(ControllerConfig::default()).with_fabric(fabric);
    c.install_base_routes().unwrap();
    let near = c.register_storage(cache_cap(100)).unwrap();
    let far = c
        .register_storage(StorageCapability::new(
            SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 9), 8080),
            1 << 20,
        ))
        .unwrap();
    c.report_stats(near, 100, 1, &[]).unwrap();
    assert!(matches!(
        c.report_metadata(&meta("a.bin")).unwrap(),
        MetadataOutcome::Forked { session, ref switch, .. } if session == far && *switch == "s3"
    ));
    c.report_stats(far, 1 << 20, 1, &[]).unwrap();
    assert_eq!(
        c.report_metadata(&meta("b.bin")).unwrap(),
        MetadataOutcome::OriginBusy
    );
    c.cache_query(ORIGIN);
    assert_eq!(
        c.report_metadata(&meta("b.bin")).unwrap(),
        MetadataOutcome::NoStorage
    );
}

#[test]
fn nat_rules_steer_http_to_proxy_and_back() {
    let mut r = rig();
    r.controller
        .install_nat_rules(&"s1".into(), &"proxy".into())
        .unwrap();
    let fabric = r.fabric.lock().unwrap();
    let to_origin = |port| {
        Packet::tcp(
            FlowKey::new(
                SocketAddrV4::new(CLIENT, 50000),
                SocketAddrV4::new(ORIGIN, port),
            ),
            1,
            TcpFlags::ACK,
            b"GET / HTTP/1.1\r\n\r\n".to_vec(),
        )
    };
    let http = fabric
        .inject_packet(&"client".into(), to_origin(80))
        .unwrap();
    assert_eq!(http.delivered_to, BTreeSet::from([NodeId::new("proxy")]));
    // The original destination survives for the transparent proxy.
    assert_eq!(http.primary().unwrap().packet.flow.dst_ip, ORIGIN);

    let other = fabric
        .inject_packet(&"client".into(), to_origin(443))
        .unwrap();
    assert_eq!(other.delivered_to, BTreeSet::from([NodeId::new("origin")]));

    let reply = Packet::tcp(
        FlowKey::new(
            SocketAddrV4::new(ORIGIN, 80),
            SocketAddrV4::new(CLIENT, 50000),
        ),
        1,
        TcpFlags::ACK,
        b"HTTP/1.1 200 OK\r\n\r\n".to_vec(),
    );
    let back = fabric.inject_packet(&"proxy".into(), reply).unwrap();
    assert_eq!(back.delivered_to, BTreeSet::from([NodeId::new("client")]));

    // The proxy's own upstream HTTP traffic is not looped back to it.
    let upstream = Packet::tcp(
        FlowKey::new(
            SocketAddrV4::new(PROXY, 40001),
            SocketAddrV4::new(ORIGIN, 80),
        ),
        1,
        TcpFlags::ACK,
        b"GET / HTTP/1.1\r\n\r\n".to_vec(),
    );
    let up = fabric.inject_packet(&"proxy".into(), upstream).unwrap();
    assert_eq!(up.delivered_to, BTreeSet::from([NodeId::new("origin")]));
}

#[test]
fn nat_rules_reject_unknown_nodes() {
    let mut r = rig();
    assert!(r
        .controller
        .install_nat_rules(&"s9".into(), &"proxy".into())
        .is_err());
    assert!(r
        .controller
        .install_nat_rules(&"s1".into(), &"nobody".into())
        .is_err());
    let mut bare = Controller::new(ControllerConfig::default());
    assert_eq!(
        bare.install_nat_rules(&"s1".into(), &"proxy".into()),
        Err(ControllerError::NoFabric)
    );
}

#[test]
fn fork_point_through_controller() {
    let r = rig();
    assert_eq!(
        r.controller
            .compute_fork_point(&"origin".into(), &"proxy".into(), &"cache".into())
            .unwrap(),
        NodeId::new("s2")
    );
}
