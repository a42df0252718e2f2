//! Transparent HTTP proxy: learns what a client asks for, consults the
//! controller, and fetches from a cache or the origin accordingly.

mod decision;
mod request;
mod server;

pub use decision::{decide, ProxyDecision};
pub use request::{parse_get, ParseError, ParsedRequest};
pub use server::{relay, OriginResolver, ProxyConfig, ProxyServer, ProxyStats, TransferSummary};
