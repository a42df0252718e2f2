//! Small HTTP/1.1 message helpers shared by the proxy, the cache and the
//! harness' scripted endpoints.

use std::io::{self, Read};

/// Upper bound on a request or response head we are willing to buffer.
pub const MAX_HEAD_BYTES: usize = 16 * 1024;

/// Offset one past the `\r\n\r\n` terminating the head, if present.
pub fn find_head_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n").map(|i| i + 4)
}

#[derive(Debug)]
pub enum HeadRead {
    /// Head bytes plus whatever body bytes arrived in the same reads.
    Complete {
        buf: Vec<u8>,
        head_len: usize,
    },
    TooLarge,
    /// Peer closed before a full head arrived.
    Eof(Vec<u8>),
}

/// Reads from `reader` until a full head has been buffered.
pub fn read_head<R: Read>(reader: &mut R, limit: usize) -> io::Result<HeadRead> {
    let mut buf = Vec::with_capacity(1024);
    let mut chunk = [0u8; 2048];
    loop {
        let n = reader.read(&mut chunk)?;
        if n == 0 {
            return Ok(HeadRead::Eof(buf));
        }
        // Only rescan the tail that could contain a new terminator.
        let scan_from = buf.len().saturating_sub(3);
        buf.extend_from_slice(&chunk[..n]);
        if let Some(end) = find_head_end(&buf[scan_from..]) {
            let head_len = scan_from + end;
            if head_len > limit {
                return Ok(HeadRead::TooLarge);
            }
            return Ok(HeadRead::Complete { buf, head_len });
        }
        if buf.len() >= limit {
            return Ok(HeadRead::TooLarge);
        }
    }
}

/// An HTTP/1.1 response as emitted by our own endpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    /// A response with `Content-Length` and `Connection: close` set.
    pub fn new(status: u16, body: Vec<u8>) -> Self {
        HttpResponse {
            status,
            headers: vec![
                ("Content-Length".to_string(), body.len().to_string()),
                ("Connection".to_string(), "close".to_string()),
            ],
            body,
        }
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.to_string(), value.to_string()));
        self
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!(
            "HTTP/1.1 {} {}\r\n",
            self.status,
            reason_phrase(self.status)
        );
        for (name, value) in &self.headers {
            out.push_str(name);
            out.push_str(": ");
            out.push_str(value);
            out.push_str("\r\n");
        }
        out.push_str("\r\n");
        let mut bytes = out.into_bytes();
        bytes.extend_from_slice(&self.body);
        bytes
    }
}

pub fn reason_phrase(status: u16) -> &'static str {
    match status {
        200 => "OK",
        204 => "No Content",
        400 => "Bad Request",
        404 => "Not Found",
        405 => "Method Not Allowed",
        409 => "Conflict",
        422 => "Unprocessable Entity",
        431 => "Request Header Fields Too Large",
        500 => "Internal Server Error",
        502 => "Bad Gateway",
        503 => "Service Unavailable",
        _ => "Unknown",
    }
}

/// Builds a minimal GET request head.
pub fn get_request(path: &str, host: &str) -> Vec<u8> {
    format!("GET {path} HTTP/1.1\r\nHost: {host}\r\nUser-Agent: contentnet\r\nAccept: */*\r\n\r\n")
        .into_bytes()
}

/// Splits a request target into `(path, query)` and returns the content
/// name for it: leading `/` stripped, query string kept, bare `/` mapped
/// to `index_name`.
pub fn content_name(target: &str, index_name: &str) -> String {
    let name = target.strip_prefix('/').unwrap_or(target);
    if name.is_empty() || name.starts_with('?') {
        format!("{index_name}{name}")
    } else {
        name.to_string()
    }
}
