//! Frame formats of the TCP-emulated link. All integers are little-endian.
//!
//! ```text
//! verb frame  = u8 verb_kind | u32 region_id | u64 offset | u32 length
//!               | u64 operand_a | u64 operand_b | payload (WRITE/SEND only)
//! reply frame = u8 status | u32 length | payload
//! ```
//!
//! `verb_kind`: 1=READ, 2=WRITE, 3=CAS, 4=FA, 5=SEND. `operand_a`/`operand_b`
//! carry expected/swap for CAS and addend/unused for FA.

use std::io::{self, Read, Write};

use super::Status;

pub const VERB_HEADER_LEN: usize = 1 + 4 + 8 + 4 + 8 + 8;
pub const REPLY_HEADER_LEN: usize = 1 + 4;

/// Largest payload accepted from the wire.
pub const MAX_PAYLOAD: u32 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum VerbKind {
    Read = 1,
    Write = 2,
    Cas = 3,
    FetchAdd = 4,
    Send = 5,
}

impl VerbKind {
    pub fn from_u8(v: u8) -> Option<VerbKind> {
        Some(match v {
            1 => VerbKind::Read,
            2 => VerbKind::Write,
            3 => VerbKind::Cas,
            4 => VerbKind::FetchAdd,
            5 => VerbKind::Send,
            _ => return None,
        })
    }

    fn carries_payload(self) -> bool {
        matches!(self, VerbKind::Write | VerbKind::Send)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerbFrame {
    pub kind: VerbKind,
    pub region_id: u32,
    pub offset: u64,
    pub length: u32,
    pub operand_a: u64,
    pub operand_b: u64,
    pub payload: Vec<u8>,
}

impl VerbFrame {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(VERB_HEADER_LEN + self.payload.len());
        buf.push(self.kind as u8);
        buf.extend_from_slice(&self.region_id.to_le_bytes());
        buf.extend_from_slice(&self.offset.to_le_bytes());
        buf.extend_from_slice(&self.length.to_le_bytes());
        buf.extend_from_slice(&self.operand_a.to_le_bytes());
        buf.extend_from_slice(&self.operand_b.to_le_bytes());
        if self.kind.carries_payload() {
            buf.extend_from_slice(&self.payload);
        }
        buf
    }

    /// Reads one frame. Returns `Ok(None)` on a clean EOF before the first byte.
    pub fn read_from<R: Read>(r: &mut R) -> io::Result<Option<VerbFrame>> {
        let mut hdr = [0u8; VERB_HEADER_LEN];
        if !read_exact_or_eof(r, &mut hdr)? {
            return Ok(None);
        }
        let kind = VerbKind::from_u8(hdr[0])
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "unknown verb kind"))?;
        let region_id = u32::from_le_bytes(hdr[1..5].try_into().unwrap());
        let offset = u64::from_le_bytes(hdr[5..13].try_into().unwrap());
        let length = u32::from_le_bytes(hdr[13..17].try_into().unwrap());
        let operand_a = u64::from_le_bytes(hdr[17..25].try_into().unwrap());
        let operand_b = u64::from_le_bytes(hdr[25..33].try_into().unwrap());
        let mut payload = Vec::new();
        if kind.carries_payload() {
            if length > MAX_PAYLOAD {
                return Err(io::Error::new(io::ErrorKind::InvalidData, "payload too large"));
            }
            payload = vec![0u8; length as usize];
            r.read_exact(&mut payload)?;
        }
        Ok(Some(VerbFrame {
            kind,
            region_id,
            offset,
            length,
            operand_a,
            operand_b,
            payload,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplyFrame {
    pub status: Status,
    pub payload: Vec<u8>,
}

impl ReplyFrame {
    pub fn status(status: Status) -> Self {
        ReplyFrame {
            status,
            payload: Vec::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(REPLY_HEADER_LEN + self.payload.len());
        buf.push(self.status as u8);
        buf.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.payload);
        buf
    }

    pub fn read_from<R: Read>(r: &mut R) -> io::Result<ReplyFrame> {
        let mut hdr = [0u8; REPLY_HEADER_LEN];
        r.read_exact(&mut hdr)?;
        let status = Status::from_u8(hdr[0])
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "unknown status"))?;
        let len = u32::from_le_bytes(hdr[1..5].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "payload too large"));
        }
        let mut payload = vec![0u8; len as usize];
        r.read_exact(&mut payload)?;
        Ok(ReplyFrame { status, payload })
    }
}

pub(crate) fn write_all_flush<W: Write>(w: &mut W, bytes: &[u8]) -> io::Result<()> {
    w.write_all(bytes)?;
    w.flush()
}

pub(crate) fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}
