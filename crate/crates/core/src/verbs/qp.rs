use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};

use super::region::Node;
use super::wire::{ReplyFrame, VerbFrame, VerbKind};
use super::{spin_for, Completion, OpKind, RegionId, RemoteRegion, Status, WorkRequest};

struct PostedRecv {
    wr_id: u64,
    capacity: usize,
}

/// Passive half of a connection: the node whose memory one-sided verbs
/// target, plus the receive queue that incoming SENDs consume.
pub(crate) struct Endpoint {
    node: Arc<Node>,
    posted: Mutex<VecDeque<PostedRecv>>,
    recv_tx: Sender<Completion>,
    recv_rx: Receiver<Completion>,
}

impl Endpoint {
    pub(crate) fn new(node: Arc<Node>) -> Arc<Endpoint> {
        let (recv_tx, recv_rx) = crossbeam_channel::unbounded();
        Arc::new(Endpoint {
            node,
            posted: Mutex::new(VecDeque::new()),
            recv_tx,
            recv_rx,
        })
    }

    fn post_recv(&self, wr_id: u64, capacity: usize) {
        self.posted
            .lock()
            .unwrap()
            .push_back(PostedRecv { wr_id, capacity });
    }

    /// Executes one incoming verb frame. This is the emulated RNIC: it only
    /// touches registered memory and the receive queue, never application
    /// state.
    pub(crate) fn execute(&self, frame: &VerbFrame) -> ReplyFrame {
        if frame.kind == VerbKind::Send {
            return self.deliver(&frame.payload);
        }
        let Some(mem) = self.node.lookup(RegionId(frame.region_id)) else {
            return ReplyFrame::status(Status::InvalidRegion);
        };
        let result = match frame.kind {
            VerbKind::Read => mem.read(frame.offset, frame.length as u64),
            VerbKind::Write => {
                if frame.payload.len() != frame.length as usize {
                    return ReplyFrame::status(Status::InvalidRequest);
                }
                mem.write(frame.offset, &frame.payload).map(|()| Vec::new())
            }
            VerbKind::Cas => mem
                .compare_swap(frame.offset, frame.operand_a, frame.operand_b)
                .map(|old| old.to_le_bytes().to_vec()),
            VerbKind::FetchAdd => mem
                .fetch_add(frame.offset, frame.operand_a)
                .map(|old| old.to_le_bytes().to_vec()),
            VerbKind::Send => unreachable!(),
        };
        match result {
            Ok(payload) => ReplyFrame {
                status: Status::Success,
                payload,
            },
            Err(status) => ReplyFrame::status(status),
        }
    }

    fn deliver(&self, payload: &[u8]) -> ReplyFrame {
        // Holding the queue lock while pushing keeps per-connection FIFO order.
        let mut posted = self.posted.lock().unwrap();
        let Some(recv) = posted.pop_front() else {
            return ReplyFrame::status(Status::ReceiverNotReady);
        };
        if payload.len() > recv.capacity {
            let _ = self.recv_tx.send(Completion {
                wr_id: recv.wr_id,
                kind: OpKind::Recv,
                status: Status::Truncated,
                payload: Vec::new(),
            });
            return ReplyFrame::status(Status::Truncated);
        }
        let _ = self.recv_tx.send(Completion {
            wr_id: recv.wr_id,
            kind: OpKind::Recv,
            status: Status::Success,
            payload: payload.to_vec(),
        });
        ReplyFrame::status(Status::Success)
    }
}

/// Carries verb frames to the peer's passive side.
pub(crate) trait Link: Send {
    fn transmit(&mut self, frame: &VerbFrame) -> ReplyFrame;
}

pub(crate) struct LocalLink {
    peer: Arc<Endpoint>,
}

impl LocalLink {
    pub(crate) fn new(peer: Arc<Endpoint>) -> Self {
        LocalLink { peer }
    }
}

impl Link for LocalLink {
    fn transmit(&mut self, frame: &VerbFrame) -> ReplyFrame {
        self.peer.execute(frame)
    }
}

/// One end of an emulated RDMA connection.
///
/// Work requests complete in posting order. `post` pushes the completion to
/// the send completion queue for polling; the convenience methods (`read`,
/// `cas`, ...) return it directly instead. Incoming SENDs complete on the
/// receive completion queue.
pub struct QueuePair {
    local: Arc<Endpoint>,
    link: Mutex<Box<dyn Link>>,
    latency: Duration,
    next_wr: AtomicU64,
    send_cq_tx: Sender<Completion>,
    send_cq_rx: Receiver<Completion>,
    peer_id: u32,
    remote_regions: Vec<RemoteRegion>,
}

impl std::fmt::Debug for QueuePair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QueuePair")
            .field("peer_id", &self.peer_id)
            .field("latency", &self.latency)
            .field("remote_regions", &self.remote_regions)
            .finish()
    }
}

impl QueuePair {
    pub(crate) fn new(
        local: Arc<Endpoint>,
        link: Box<dyn Link>,
        latency: Duration,
        peer_id: u32,
        remote_regions: Vec<RemoteRegion>,
    ) -> QueuePair {
        let (send_cq_tx, send_cq_rx) = crossbeam_channel::unbounded();
        QueuePair {
            local,
            link: Mutex::new(link),
            latency,
            next_wr: AtomicU64::new(1),
            send_cq_tx,
            send_cq_rx,
            peer_id,
            remote_regions,
        }
    }

    /// Identifier the passive node assigned to the connecting peer.
    pub fn peer_id(&self) -> u32 {
        self.peer_id
    }

    /// Regions the remote node exported at connection time.
    pub fn remote_regions(&self) -> &[RemoteRegion] {
        &self.remote_regions
    }

    pub fn latency(&self) -> Duration {
        self.latency
    }

    fn next_wr_id(&self) -> u64 {
        self.next_wr.fetch_add(1, Ordering::Relaxed)
    }

    fn precheck(wr: &WorkRequest) -> Result<VerbFrame, Status> {
        fn range(region: &RemoteRegion, offset: u64, len: u64) -> Result<(), Status> {
            match offset.checked_add(len) {
                Some(end) if len > 0 && end <= region.len => Ok(()),
                _ => Err(Status::LocalAccessError),
            }
        }
        fn atomic(region: &RemoteRegion, offset: u64) -> Result<(), Status> {
            if !offset.is_multiple_of(8) {
                return Err(Status::LocalAccessError);
            }
            range(region, offset, 8)
        }
        let frame = |kind, region: &RemoteRegion, offset, length, a, b, payload| VerbFrame {
            kind,
            region_id: region.id.0,
            offset,
            length,
            operand_a: a,
            operand_b: b,
            payload,
        };
        Ok(match wr {
            WorkRequest::Read { region, offset, len } => {
                range(region, *offset, *len as u64)?;
                frame(VerbKind::Read, region, *offset, *len, 0, 0, Vec::new())
            }
            WorkRequest::Write { region, offset, payload } => {
                range(region, *offset, payload.len() as u64)?;
                let len = u32::try_from(payload.len()).map_err(|_| Status::LocalAccessError)?;
                frame(VerbKind::Write, region, *offset, len, 0, 0, payload.clone())
            }
            WorkRequest::Cas { region, offset, expected, swap } => {
                atomic(region, *offset)?;
                frame(VerbKind::Cas, region, *offset, 8, *expected, *swap, Vec::new())
            }
            WorkRequest::FetchAdd { region, offset, addend } => {
                atomic(region, *offset)?;
                frame(VerbKind::FetchAdd, region, *offset, 8, *addend, 0, Vec::new())
            }
            WorkRequest::Send { payload } => {
                let len = u32::try_from(payload.len()).map_err(|_| Status::LocalAccessError)?;
                VerbFrame {
                    kind: VerbKind::Send,
                    region_id: 0,
                    offset: 0,
                    length: len,
                    operand_a: 0,
                    operand_b: 0,
                    payload: payload.clone(),
                }
            }
        })
    }

    fn execute(&self, wr: &WorkRequest) -> Completion {
        let wr_id = self.next_wr_id();
        let kind = wr.kind();
        let reply = match Self::precheck(wr) {
            Err(status) => ReplyFrame::status(status),
            Ok(frame) => {
                spin_for(self.latency);
                let reply = self.link.lock().unwrap().transmit(&frame);
                spin_for(self.latency);
                reply
            }
        };
        Completion {
            wr_id,
            kind,
            status: reply.status,
            payload: reply.payload,
        }
    }

    /// Posts a work request; its completion is queued on the send CQ.
    pub fn post(&self, wr: WorkRequest) -> u64 {
        let c = self.execute(&wr);
        let id = c.wr_id;
        let _ = self.send_cq_tx.send(c);
        id
    }

    /// Polls the send completion queue.
    pub fn poll_cq(&self) -> Option<Completion> {
        self.send_cq_rx.try_recv().ok()
    }

    /// Posts a RECEIVE buffer of `capacity` bytes.
    pub fn post_recv(&self, capacity: usize) -> u64 {
        let wr_id = self.next_wr_id();
        self.local.post_recv(wr_id, capacity);
        wr_id
    }

    /// Polls the receive completion queue.
    pub fn poll_recv_cq(&self) -> Option<Completion> {
        self.local.recv_rx.try_recv().ok()
    }

    /// Waits up to `timeout` for a receive completion.
    pub fn wait_recv(&self, timeout: Duration) -> Option<Completion> {
        self.local.recv_rx.recv_timeout(timeout).ok()
    }

    pub fn read(&self, region: &RemoteRegion, offset: u64, len: u32) -> Completion {
        self.execute(&WorkRequest::Read {
            region: *region,
            offset,
            len,
        })
    }

    pub fn write(&self, region: &RemoteRegion, offset: u64, payload: &[u8]) -> Completion {
        self.execute(&WorkRequest::Write {
            region: *region,
            offset,
            payload: payload.to_vec(),
        })
    }

    pub fn compare_swap(&self, region: &RemoteRegion, offset: u64, expected: u64, swap: u64) -> Completion {
        self.execute(&WorkRequest::Cas {
            region: *region,
            offset,
            expected,
            swap,
        })
    }

    pub fn fetch_add(&self, region: &RemoteRegion, offset: u64, addend: u64) -> Completion {
        self.execute(&WorkRequest::FetchAdd {
            region: *region,
            offset,
            addend,
        })
    }

    pub fn send(&self, payload: &[u8]) -> Completion {
        self.execute(&WorkRequest::Send {
            payload: payload.to_vec(),
        })
    }
}
