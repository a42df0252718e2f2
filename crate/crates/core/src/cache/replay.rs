//! Length-prefixed capture files for offline reassembly.
//!
//! Layout: the magic `CNRP` and a version byte, then records of
//! `u32 length` followed by that many bytes:
//!
//! ```text
//! src_ip[4] src_port[2] dst_ip[4] dst_port[2] seq[4] flags[1] payload[..]
//! ```
//!
//! All integers are big-endian. Flag bits: 0 FIN, 1 SYN, 2 ACK, 3 RST.

use std::io::{self, Read, Write};
use std::net::Ipv4Addr;

use super::TcpSegment;
use crate::flow::FlowKey;

pub const MAGIC: &[u8; 4] = b"CNRP";
pub const VERSION: u8 = 1;
const FIXED_LEN: usize = 17;
const FLAG_FIN: u8 = 1;
const FLAG_SYN: u8 = 1 << 1;
/// Guards against allocating for a corrupt length prefix.
const MAX_RECORD: u32 = 1 << 20;

pub struct ReplayWriter<W: Write> {
    out: W,
}

impl<W: Write> ReplayWriter<W> {
    pub fn new(mut out: W) -> io::Result<Self> {
        out.write_all(MAGIC)?;
        out.write_all(&[VERSION])?;
        Ok(ReplayWriter { out })
    }

    pub fn write(&mut self, seg: &TcpSegment) -> io::Result<()> {
        let len = u32::try_from(FIXED_LEN + seg.payload.len())
            .ok()
            .filter(|&l| l <= MAX_RECORD)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "segment too large"))?;
        let f = &seg.flow;
        self.out.write_all(&len.to_be_bytes())?;
        self.out.write_all(&f.src_ip.octets())?;
        self.out.write_all(&f.src_port.to_be_bytes())?;
        self.out.write_all(&f.dst_ip.octets())?;
        self.out.write_all(&f.dst_port.to_be_bytes())?;
        self.out.write_all(&seg.seq.to_be_bytes())?;
        let flags = if seg.fin { FLAG_FIN } else { 0 } | if seg.syn { FLAG_SYN } else { 0 };
        self.out.write_all(&[flags])?;
        self.out.write_all(&seg.payload)
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub struct ReplayReader<R: Read> {
    input: R,
}

impl<R: Read> ReplayReader<R> {
    pub fn new(mut input: R) -> io::Result<Self> {
        let mut header = [0u8; 5];
        input.read_exact(&mut header)?;
        if &header[..4] != MAGIC || header[4] != VERSION {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "not a replay file",
            ));
        }
        Ok(ReplayReader { input })
    }

    fn next_record(&mut self) -> io::Result<Option<TcpSegment>> {
        let mut len = [0u8; 4];
        match self.input.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(e),
        }
        let len = u32::from_be_bytes(len);
        if (len as usize) < FIXED_LEN || len > MAX_RECORD {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("bad record length {len}"),
            ));
        }
        let mut rec = vec![0u8; len as usize];
        self.input.read_exact(&mut rec)?;
        let ip = |o: usize| Ipv4Addr::new(rec[o], rec[o + 1], rec[o + 2], rec[o + 3]);
        let u16_at = |o: usize| u16::from_be_bytes([rec[o], rec[o + 1]]);
        let flow = FlowKey {
            src_ip: ip(0),
            src_port: u16_at(4),
            dst_ip: ip(6),
            dst_port: u16_at(10),
        };
        let seq = u32::from_be_bytes([rec[12], rec[13], rec[14], rec[15]]);
        let mut seg = TcpSegment::new(
            flow,
            seq,
            rec[FIXED_LEN..].to_vec(),
            rec[16] & FLAG_FIN != 0,
        );
        seg.syn = rec[16] & FLAG_SYN != 0;
        Ok(Some(seg))
    }
}

impl<R: Read> Iterator for ReplayReader<R> {
    type Item = io::Result<TcpSegment>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_record().transpose()
    }
}
