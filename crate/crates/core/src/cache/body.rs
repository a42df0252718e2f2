use thiserror::Error;

use crate::http::find_head_end;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Framing {
    ContentLength(u64),
    Chunked,
    /// Body runs to the end of the stream.
    CloseDelimited,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedBody {
    pub status: u16,
    pub framing: Framing,
    pub content_type: Option<String>,
    /// For chunked responses, the raw still-encoded bytes.
    pub body: Vec<u8>,
    /// Bytes past the declared Content-Length.
    pub trailing: usize,
}

impl ExtractedBody {
    /// Only complete 200 responses with a declared length are stored.
    pub fn is_cacheable(&self) -> bool {
        self.status == 200 && matches!(self.framing, Framing::ContentLength(_))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BodyError {
    #[error("malformed response head: {0}")]
    MalformedHead(String),
    #[error("body is {got} bytes, Content-Length declared {declared}")]
    Truncated { declared: u64, got: u64 },
}

/// Splits a reassembled response stream into status and body.
pub fn extract_body(stream: &[u8]) -> Result<ExtractedBody, BodyError> {
    let head_len =
        find_head_end(stream).ok_or_else(|| BodyError::MalformedHead("no end of head".into()))?;
    let mut slots = [httparse::EMPTY_HEADER; 96];
    let mut resp = httparse::Response::new(&mut slots);
    match resp.parse(&stream[..head_len]) {
        Ok(httparse::Status::Complete(_)) => {}
        Ok(httparse::Status::Partial) => {
            return Err(BodyError::MalformedHead("partial head".into()))
        }
        Err(e) => return Err(BodyError::MalformedHead(e.to_string())),
    }
    let status = resp
        .code
        .ok_or_else(|| BodyError::MalformedHead("no status".into()))?;
    let header = |name: &str| {
        resp.headers
            .iter()
            .find(|h| h.name.eq_ignore_ascii_case(name))
            .map(|h| String::from_utf8_lossy(h.value).trim().to_string())
    };
    let content_type = header("content-type");
    let rest = &stream[head_len..];

    let chunked =
        header("transfer-encoding").is_some_and(|te| te.to_ascii_lowercase().contains("chunked"));
    let framing = if chunked {
        Framing::Chunked
    } else if let Some(cl) = header("content-length") {
        let declared: u64 = cl
            .parse()
            .map_err(|_| BodyError::MalformedHead(format!("bad Content-Length '{cl}'")))?;
        Framing::ContentLength(declared)
    } else {
        Framing::CloseDelimited
    };
    let (body, trailing) = match framing {
        Framing::ContentLength(declared) => {
            if (rest.len() as u64) < declared {
                return Err(BodyError::Truncated {
                    declared,
                    got: rest.len() as u64,
                });
            }
            let declared = declared as usize;
            (rest[..declared].to_vec(), rest.len() - declared)
        }
        Framing::Chunked | Framing::CloseDelimited => (rest.to_vec(), 0),
    };
    Ok(ExtractedBody {
        status,
        framing,
        content_type,
        body,
        trailing,
    })
}
