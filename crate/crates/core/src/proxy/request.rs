use std::net::SocketAddrV4;

use thiserror::Error;

use crate::http::{content_name, find_head_end, MAX_HEAD_BYTES};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    /// The head is not complete yet; read more and retry.
    #[error("incomplete request head")]
    Incomplete,
    #[error("request head exceeds {MAX_HEAD_BYTES} bytes")]
    HeadTooLarge,
    #[error("malformed request: {0}")]
    Malformed(String),
}

/// A client request as seen by the transparent proxy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRequest {
    pub method: String,
    /// Request target exactly as sent.
    pub target: String,
    /// Origin-form of the target.
    pub path: String,
    /// Content name: path without the leading `/`, query string kept.
    pub file_name: String,
    pub host: Option<String>,
    pub original_dst: SocketAddrV4,
    pub headers: Vec<(String, Vec<u8>)>,
    pub head_len: usize,
    /// Everything received so far, head and any body bytes.
    pub raw: Vec<u8>,
}

impl ParsedRequest {
    pub fn is_get(&self) -> bool {
        self.method == "GET"
    }

    /// Bytes that followed the head in the same read.
    pub fn body_prefix(&self) -> &[u8] {
        &self.raw[self.head_len..]
    }

    /// The request to send upstream: same method and headers in origin
    /// form, hop-by-hop connection headers replaced by `Connection: close`.
    /// With `rewrite_path` the target becomes `/<file_name>`, which is how
    /// the cache serves objects.
    pub fn upstream_bytes(&self, rewrite_path: bool) -> Vec<u8> {
        let target = if rewrite_path {
            format!("/{}", self.file_name)
        } else {
            self.path.clone()
        };
        let mut out = format!("{} {} HTTP/1.1\r\n", self.method, target).into_bytes();
        for (name, value) in &self.headers {
            let hop_by_hop = ["connection", "proxy-connection", "keep-alive"]
                .iter()
                .any(|h| name.eq_ignore_ascii_case(h));
            if hop_by_hop {
                continue;
            }
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(b": ");
            out.extend_from_slice(value);
            out.extend_from_slice(b"\r\n");
        }
        out.extend_from_slice(b"Connection: close\r\n\r\n");
        out.extend_from_slice(self.body_prefix());
        out
    }
}

/// Parses the request head in `raw` and derives the content name.
pub fn parse_get(
    raw: &[u8],
    original_dst: SocketAddrV4,
    index_name: &str,
) -> Result<ParsedRequest, ParseError> {
    let Some(head_len) = find_head_end(raw) else {
        return Err(if raw.len() >= MAX_HEAD_BYTES {
            ParseError::HeadTooLarge
        } else {
            ParseError::Incomplete
        });
    };
    if head_len > MAX_HEAD_BYTES {
        return Err(ParseError::HeadTooLarge);
    }

    let mut slots = [httparse::EMPTY_HEADER; 96];
    let mut req = httparse::Request::new(&mut slots);
    match req.parse(&raw[..head_len]) {
        Ok(httparse::Status::Complete(_)) => {}
        Ok(httparse::Status::Partial) => return Err(ParseError::Incomplete),
        Err(e) => return Err(ParseError::Malformed(e.to_string())),
    }
    let method = req.method.unwrap_or_default().to_string();
    let target = req.path.unwrap_or_default().to_string();
    let headers: Vec<(String, Vec<u8>)> = req
        .headers
        .iter()
        .map(|h| (h.name.to_string(), h.value.to_vec()))
        .collect();
    let host = headers
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case("host"))
        .map(|(_, v)| String::from_utf8_lossy(v).trim().to_string());

    let path = origin_form(&target)
        .ok_or_else(|| ParseError::Malformed(format!("unsupported request target '{target}'")))?;
    Ok(ParsedRequest {
        file_name: content_name(path, index_name),
        path: path.to_string(),
        method,
        target,
        host,
        original_dst,
        headers,
        head_len,
        raw: raw.to_vec(),
    })
}

/// Reduces absolute-form targets to their path; rejects authority and
/// asterisk forms.
fn origin_form(target: &str) -> Option<&str> {
    if target.starts_with('/') {
        return Some(target);
    }
    let rest = target
        .strip_prefix("http://")
        .or_else(|| target.strip_prefix("HTTP://"))?;
    Some(rest.find('/').map_or("/", |i| &rest[i..]))
}
