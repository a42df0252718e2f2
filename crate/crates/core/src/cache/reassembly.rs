use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::FlowKey;

pub const DEFAULT_MAX_FLOW_BYTES: usize = 16 * 1024 * 1024;
pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(60);

/// One captured segment of a one-directional stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcpSegment {
    pub flow: FlowKey,
    pub seq: u32,
    pub payload: Vec<u8>,
    pub fin: bool,
    /// Carries the initial sequence number; data starts at `seq + 1`.
    #[serde(default)]
    pub syn: bool,
}

impl TcpSegment {
    pub fn new(flow: FlowKey, seq: u32, payload: impl Into<Vec<u8>>, fin: bool) -> Self {
        TcpSegment {
            flow,
            seq,
            payload: payload.into(),
            fin,
            syn: false,
        }
    }

    /// The handshake segment announcing `isn`.
    pub fn syn(flow: FlowKey, isn: u32) -> Self {
        TcpSegment {
            syn: true,
            ..TcpSegment::new(flow, isn, Vec::new(), false)
        }
    }

    /// Empty payloads only make sense on a SYN or FIN.
    pub fn is_valid(&self) -> bool {
        self.flow.is_valid() && (self.fin || self.syn || !self.payload.is_empty())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReassemblyError {
    /// `at` counts bytes from the start of the stream.
    #[error("incomplete stream for {flow}: missing bytes at offset {at}")]
    IncompleteStream { flow: FlowKey, at: i64 },
    #[error("no FIN seen yet for {0}")]
    FinNotSeen(FlowKey),
    #[error("no buffered segments for {0}")]
    UnknownFlow(FlowKey),
    #[error("flow {flow} exceeded the {cap}-byte buffer cap")]
    OverCap { flow: FlowKey, cap: usize },
    #[error("invalid segment for {0}")]
    InvalidSegment(FlowKey),
}

/// Buffered segments of one flow. Sequence numbers are stored as signed
/// offsets from the first seq seen, so wraparound and segments that
/// arrive before the stream's first one both order correctly.
///
/// The stream starts one past the SYN when one was captured. Otherwise
/// the lowest buffered offset is the best available start, which cannot
/// rule out a lost leading segment.
#[derive(Debug)]
pub struct FlowBuffer {
    base_seq: u32,
    segments: BTreeMap<i64, Vec<u8>>,
    anchor: Option<i64>,
    fin_end: Option<i64>,
    buffered_bytes: usize,
    first_seen: Duration,
    last_seen: Duration,
}

impl FlowBuffer {
    fn new(base_seq: u32, now: Duration) -> Self {
        FlowBuffer {
            base_seq,
            segments: BTreeMap::new(),
            anchor: None,
            fin_end: None,
            buffered_bytes: 0,
            first_seen: now,
            last_seen: now,
        }
    }

    fn offset(&self, seq: u32) -> i64 {
        seq.wrapping_sub(self.base_seq) as i32 as i64
    }

    pub fn fin_seen(&self) -> bool {
        self.fin_end.is_some()
    }

    /// Whether a SYN fixed the stream start.
    pub fn is_anchored(&self) -> bool {
        self.anchor.is_some()
    }

    /// Payload of the earliest buffered segment.
    pub fn leading_bytes(&self) -> &[u8] {
        self.segments.values().next().map_or(&[], |v| v.as_slice())
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn buffered_bytes(&self) -> usize {
        self.buffered_bytes
    }

    pub fn first_seen(&self) -> Duration {
        self.first_seen
    }

    fn insert(&mut self, seg: &TcpSegment) {
        let off = self.offset(seg.seq);
        if seg.syn {
            self.anchor.get_or_insert(off + 1);
            return;
        }
        let (payload, fin) = (&seg.payload, seg.fin);
        if !payload.is_empty() && !self.segments.contains_key(&off) {
            self.segments.insert(off, payload.to_vec());
            self.buffered_bytes += payload.len();
        }
        if fin && self.fin_end.is_none() {
            self.fin_end = Some(off + payload.len() as i64);
        }
    }

    fn start(&self) -> i64 {
        self.anchor
            .or_else(|| self.segments.keys().next().copied())
            .or(self.fin_end)
            .unwrap_or(0)
    }

    /// First offset not covered between the start and the FIN, or `None`
    /// when coverage is complete.
    fn first_gap(&self) -> Option<i64> {
        let end = self.fin_end?;
        let mut cursor = self.start();
        for (&off, data) in &self.segments {
            if cursor >= end {
                break;
            }
            let seg_end = off + data.len() as i64;
            if seg_end <= cursor {
                continue;
            }
            if off > cursor {
                return Some(cursor);
            }
            cursor = seg_end;
        }
        (cursor < end).then_some(cursor)
    }

    fn is_complete(&self) -> bool {
        let Some(end) = self.fin_end else {
            return false;
        };
        // Buffered bytes bound coverage from above; skip the scan while short.
        if (self.buffered_bytes as i64) < end - self.start() {
            return false;
        }
        self.first_gap().is_none()
    }

    fn assemble(&self) -> Vec<u8> {
        let end = self.fin_end.expect("assemble after FIN");
        let start = self.start();
        let mut out = Vec::with_capacity((end - start).max(0) as usize);
        let mut cursor = start;
        for (&off, data) in &self.segments {
            let seg_end = (off + data.len() as i64).min(end);
            if seg_end <= cursor {
                continue;
            }
            let skip = (cursor - off).max(0) as usize;
            out.extend_from_slice(&data[skip..(seg_end - off) as usize]);
            cursor = seg_end;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SegmentOutcome {
    Buffered,
    /// SYN and FIN seen with every byte between them present; the flow
    /// is released.
    Complete(Vec<u8>),
    /// FIN seen and covered from the lowest seq, but no SYN fixed the
    /// start. The caller decides via [`Reassembler::peek`] whether to
    /// [`Reassembler::reassemble`] now or wait for earlier segments.
    Unanchored,
    /// The flow was abandoned and its buffer freed.
    Dropped(ReassemblyError),
}

/// Per-flow reassembly of mirrored response streams.
#[derive(Debug)]
pub struct Reassembler {
    flows: HashMap<FlowKey, FlowBuffer>,
    max_flow_bytes: usize,
    idle_timeout: Duration,
}

impl Default for Reassembler {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_FLOW_BYTES, DEFAULT_IDLE_TIMEOUT)
    }
}

impl Reassembler {
    pub fn new(max_flow_bytes: usize, idle_timeout: Duration) -> Self {
        Reassembler {
            flows: HashMap::new(),
            max_flow_bytes,
            idle_timeout,
        }
    }

    /// Buffers `segment`; returns the stream once it is complete.
    pub fn observe_segment(&mut self, segment: &TcpSegment, now: Duration) -> SegmentOutcome {
        if !segment.is_valid() {
            return SegmentOutcome::Dropped(ReassemblyError::InvalidSegment(segment.flow));
        }
        // A SYN with a different ISN starts a new connection on a reused key.
        if segment.syn {
            if let Some(existing) = self.flows.get(&segment.flow) {
                if existing
                    .anchor
                    .is_some_and(|a| a != existing.offset(segment.seq) + 1)
                {
                    self.flows.remove(&segment.flow);
                }
            }
        }
        let buf = self
            .flows
            .entry(segment.flow)
            .or_insert_with(|| FlowBuffer::new(segment.seq, now));
        buf.last_seen = now;
        buf.insert(segment);
        if buf.buffered_bytes > self.max_flow_bytes {
            self.flows.remove(&segment.flow);
            return SegmentOutcome::Dropped(ReassemblyError::OverCap {
                flow: segment.flow,
                cap: self.max_flow_bytes,
            });
        }
        if buf.is_complete() {
            if !buf.is_anchored() {
                return SegmentOutcome::Unanchored;
            }
            let stream = buf.assemble();
            self.flows.remove(&segment.flow);
            return SegmentOutcome::Complete(stream);
        }
        SegmentOutcome::Buffered
    }

    /// The stream as it would be reassembled now, without releasing the
    /// flow. `None` unless FIN is seen and coverage is complete.
    pub fn peek(&self, flow: &FlowKey) -> Option<Vec<u8>> {
        let buf = self.flows.get(flow)?;
        buf.is_complete().then(|| buf.assemble())
    }

    /// Assembles a flow whose FIN has been seen. The flow is released
    /// whether or not coverage is complete.
    pub fn reassemble(&mut self, flow: &FlowKey) -> Result<Vec<u8>, ReassemblyError> {
        let buf = self
            .flows
            .get(flow)
            .ok_or(ReassemblyError::UnknownFlow(*flow))?;
        if !buf.fin_seen() {
            return Err(ReassemblyError::FinNotSeen(*flow));
        }
        let buf = self.flows.remove(flow).expect("present");
        match buf.first_gap() {
            Some(at) => Err(ReassemblyError::IncompleteStream {
                flow: *flow,
                at: at - buf.start(),
            }),
            None => Ok(buf.assemble()),
        }
    }

    /// Drops flows with no traffic for the idle timeout.
    pub fn purge_idle(&mut self, now: Duration) -> Vec<FlowKey> {
        let timeout = self.idle_timeout;
        let stale: Vec<FlowKey> = self
            .flows
            .iter()
            .filter(|(_, b)| now.saturating_sub(b.last_seen) >= timeout)
            .map(|(k, _)| *k)
            .collect();
        for k in &stale {
            self.flows.remove(k);
        }
        stale
    }

    pub fn flow(&self, flow: &FlowKey) -> Option<&FlowBuffer> {
        self.flows.get(flow)
    }

    pub fn pending_flows(&self) -> usize {
        self.flows.len()
    }
}

/// A SYN at `isn`, then `stream` in `mss`-sized segments from `isn + 1`
/// with FIN on the last.
pub fn segment_stream(flow: FlowKey, isn: u32, stream: &[u8], mss: usize) -> Vec<TcpSegment> {
    assert!(mss > 0);
    let first = isn.wrapping_add(1);
    let mut out = vec![TcpSegment::syn(flow, isn)];
    if stream.is_empty() {
        out.push(TcpSegment::new(flow, first, Vec::new(), true));
        return out;
    }
    let n = stream.len().div_ceil(mss);
    out.extend(
        stream.chunks(mss).enumerate().map(|(i, c)| {
            TcpSegment::new(flow, first.wrapping_add((i * mss) as u32), c, i + 1 == n)
        }),
    );
    out
}
