//! Emulated RDMA verb layer.
//!
//! A [`Node`] owns registered memory regions. Peers reach it through a
//! [`QueuePair`] and issue one-sided verbs (READ, WRITE, CAS, FA) that are
//! executed by the node's passive side without involving any application
//! code, or two-sided SEND/RECV that require the receiver to have posted a
//! RECEIVE in advance.
//!
//! Two links are available: an in-process link where the passive side runs
//! on the caller's thread, and a TCP link where an agent thread on the node
//! (the emulated RNIC) executes verb frames arriving on a socket.

use std::fmt;
use std::time::{Duration, Instant};

mod qp;
mod region;
mod tcp;
pub mod wire;

pub use qp::QueuePair;
pub use region::{MemoryRegion, Node, MAX_PEERS};
pub use tcp::TcpAgent;

/// Identifier of a registered region, unique per [`Node`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionId(pub u32);

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mr{}", self.0)
    }
}

/// What a peer knows about a region exported by a remote node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RemoteRegion {
    pub id: RegionId,
    pub len: u64,
}

/// Verb kind reported by a [`Completion`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Read,
    Write,
    Cas,
    FetchAdd,
    Send,
    Recv,
}

/// Completion status codes. The numeric values are the status byte of a
/// reply frame on the TCP link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Status {
    Success = 0,
    /// Misaligned atomic or an access outside the region bounds.
    LocalAccessError = 1,
    /// SEND arrived while the receiver had no RECEIVE posted.
    ReceiverNotReady = 2,
    /// SEND payload larger than the posted RECEIVE buffer.
    Truncated = 3,
    /// Target region is not registered on the passive node.
    InvalidRegion = 4,
    /// The link to the peer failed.
    TransportError = 5,
    /// Frame could not be interpreted.
    InvalidRequest = 6,
}

impl Status {
    pub fn from_u8(v: u8) -> Option<Status> {
        Some(match v {
            0 => Status::Success,
            1 => Status::LocalAccessError,
            2 => Status::ReceiverNotReady,
            3 => Status::Truncated,
            4 => Status::InvalidRegion,
            5 => Status::TransportError,
            6 => Status::InvalidRequest,
            _ => return None,
        })
    }

    pub fn is_success(self) -> bool {
        self == Status::Success
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Status::Success => "success",
            Status::LocalAccessError => "local access error",
            Status::ReceiverNotReady => "receiver not ready",
            Status::Truncated => "truncated",
            Status::InvalidRegion => "invalid region",
            Status::TransportError => "transport error",
            Status::InvalidRequest => "invalid request",
        };
        f.write_str(s)
    }
}

/// A completion queue entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub wr_id: u64,
    pub kind: OpKind,
    pub status: Status,
    /// Old value (little-endian) for atomics, snapshot bytes for READ,
    /// message bytes for RECV, empty otherwise.
    pub payload: Vec<u8>,
}

impl Completion {
    pub fn is_success(&self) -> bool {
        self.status.is_success()
    }

    /// Pre-operation value carried by an atomic completion.
    pub fn old_value(&self) -> Option<u64> {
        let bytes: [u8; 8] = self.payload.as_slice().try_into().ok()?;
        Some(u64::from_le_bytes(bytes))
    }

    /// Little-endian decode of a 4-byte READ.
    pub fn as_u32(&self) -> Option<u32> {
        let bytes: [u8; 4] = self.payload.as_slice().try_into().ok()?;
        Some(u32::from_le_bytes(bytes))
    }
}

/// Work request posted to a queue pair's send queue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkRequest {
    Read {
        region: RemoteRegion,
        offset: u64,
        len: u32,
    },
    Write {
        region: RemoteRegion,
        offset: u64,
        payload: Vec<u8>,
    },
    Cas {
        region: RemoteRegion,
        offset: u64,
        expected: u64,
        swap: u64,
    },
    FetchAdd {
        region: RemoteRegion,
        offset: u64,
        addend: u64,
    },
    Send {
        payload: Vec<u8>,
    },
}

impl WorkRequest {
    pub fn kind(&self) -> OpKind {
        match self {
            WorkRequest::Read { .. } => OpKind::Read,
            WorkRequest::Write { .. } => OpKind::Write,
            WorkRequest::Cas { .. } => OpKind::Cas,
            WorkRequest::FetchAdd { .. } => OpKind::FetchAdd,
            WorkRequest::Send { .. } => OpKind::Send,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VerbError {
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("too many clients connected (limit {0})")]
    ClientLimit(u32),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Busy-waits for `d`, yielding the CPU between checks so that other
/// actors keep running while the simulated wire time elapses.
pub fn spin_for(d: Duration) {
    if d.is_zero() {
        return;
    }
    wait_until(Instant::now() + d);
}

/// Waits for `deadline`, sleeping through long stretches and yielding the
/// CPU in between so that other threads keep running on a loaded machine.
pub fn wait_until(deadline: Instant) {
    const SLEEP_SLACK: Duration = Duration::from_micros(200);
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > SLEEP_SLACK {
            std::thread::sleep(left - SLEEP_SLACK);
        } else {
            std::thread::yield_now();
        }
    }
}
