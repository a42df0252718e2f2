use std::net::SocketAddrV4;

use log::warn;

use super::ParsedRequest;
use crate::controller::{ContentMetadata, ControllerClient};
use crate::flow::FlowKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxyDecision {
    /// Fetch from a cache that holds the object.
    Redirect(SocketAddrV4),
    /// Fetch from the origin the client addressed.
    Passthrough(SocketAddrV4),
    /// Not a GET; tunnel without involving the controller.
    NoProxy,
}

/// Asks the controller where `parsed` should be served from.
///
/// On a miss the five-tuple of the upstream flow (`upstream_src` →
/// original destination) is reported before passing through. If the
/// controller cannot be reached the request passes through unreported.
pub fn decide<C: ControllerClient + ?Sized>(
    parsed: &ParsedRequest,
    client: &C,
    upstream_src: SocketAddrV4,
) -> ProxyDecision {
    if !parsed.is_get() {
        return ProxyDecision::NoProxy;
    }
    match client.lookup_content(&parsed.file_name) {
        Ok(Some(location)) => ProxyDecision::Redirect(location.addr()),
        Ok(None) => {
            let flow = FlowKey::new(upstream_src, parsed.original_dst);
            let meta = ContentMetadata::new(parsed.file_name.clone(), flow);
            if let Err(e) = client.report_metadata(&meta) {
                warn!("could not report metadata for '{}': {e}", parsed.file_name);
            }
            ProxyDecision::Passthrough(parsed.original_dst)
        }
        Err(e) => {
            warn!(
                "controller lookup for '{}' failed, serving from origin: {e}",
                parsed.file_name
            );
            ProxyDecision::Passthrough(parsed.original_dst)
        }
    }
}

#[cfg(test)]
mod tests {
    use std::net::Ipv4Addr;
    use std::sync::Mutex;

    use super::*;
    use crate::controller::{
        CacheLocation, ClientError, SessionId, StatsReport, StorageCapability,
    };
    use crate::proxy::parse_get;

    #[derive(Default)]
    struct Scripted {
        hit: Option<CacheLocation>,
        down: bool,
        reported: Mutex<Vec<ContentMetadata>>,
    }

    impl ControllerClient for Scripted {
        fn lookup_content(&self, _: &str) -> Result<Option<CacheLocation>, ClientError> {
            if self.down {
                return Err(ClientError::Unreachable("connection refused".into()));
            }
            Ok(self.hit)
        }
        fn report_metadata(&self, meta: &ContentMetadata) -> Result<(), ClientError> {
            if self.down {
                return Err(ClientError::Unreachable("connection refused".into()));
            }
            self.reported.lock().unwrap().push(meta.clone());
            Ok(())
        }
        fn cache_query(&self, _: Ipv4Addr) -> Result<Option<String>, ClientError> {
            unimplemented!()
        }
        fn register_storage(&self, _: &StorageCapability) -> Result<SessionId, ClientError> {
            unimplemented!()
        }
        fn heartbeat(&self, _: SessionId) -> Result<(), ClientError> {
            unimplemented!()
        }
        fn report_stats(&self, _: &StatsReport) -> Result<(), ClientError> {
            unimplemented!()
        }
        fn confirm_stored(&self, _: SessionId, _: &str) -> Result<(), ClientError> {
            unimplemented!()
        }
        fn deregister_storage(&self, _: SessionId) -> Result<(), ClientError> {
            unimplemented!()
        }
    }

    const ORIGIN: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 4), 80);
    const SRC: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 2), 40001);

    fn get(name: &str) -> ParsedRequest {
        parse_get(
            format!("GET /{name} HTTP/1.1\r\nHost: o\r\n\r\n").as_bytes(),
            ORIGIN,
            "index.html",
        )
        .unwrap()
    }

    #[test]
    fn hit_redirects() {
        let c = Scripted {
            hit: Some(CacheLocation {
                ip: Ipv4Addr::new(10, 0, 0, 3),
                port: 8080,
            }),
            ..Default::default()
        };
        assert_eq!(
            decide(&get("a.bin"), &c, SRC),
            ProxyDecision::Redirect(SocketAddrV4::new(Ipv4Addr::new(10, 0, 0, 3), 8080))
        );
        assert!(c.reported.lock().unwrap().is_empty());
    }

    #[test]
    fn miss_reports_exact_five_tuple() {
        let c = Scripted::default();
        assert_eq!(
            decide(&get("a.bin"), &c, SRC),
            ProxyDecision::Passthrough(ORIGIN)
        );
        let reported = c.reported.lock().unwrap();
        assert_eq!(
            reported.as_slice(),
            &[ContentMetadata {
                file_name: "a.bin".into(),
                dst_ip: *ORIGIN.ip(),
                dst_port: 80,
                src_ip: *SRC.ip(),
                src_port: 40001,
            }]
        );
    }

    #[test]
    fn controller_down_fails_open() {
        let c = Scripted {
            down: true,
            ..Default::default()
        };
        assert_eq!(
            decide(&get("a.bin"), &c, SRC),
            ProxyDecision::Passthrough(ORIGIN)
        );
        assert!(c.reported.lock().unwrap().is_empty());
    }

    #[test]
    fn non_get_is_not_proxied() {
        let c = Scripted::default();
        let post = parse_get(b"POST /x HTTP/1.1\r\n\r\n", ORIGIN, "index.html").unwrap();
        assert_eq!(decide(&post, &c, SRC), ProxyDecision::NoProxy);
    }
}
