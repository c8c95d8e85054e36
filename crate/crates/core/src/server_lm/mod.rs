//! Centralized lock manager.
//!
//! Requests land in per-item FIFO queues, each behind its own mutex. A
//! release pops the holder and the queue head is granted; a run of SHARED
//! requests at the head is granted together. Grants are strictly FIFO: a
//! SHARED request that arrives behind a waiting EXCLUSIVE one queues even if
//! the current holders are SHARED.
//!
//! Two frontends share the same [`LockManager`]: [`tcp`] (length-prefixed
//! frames over one TCP connection per client) and [`sr`] (one message per
//! SEND over an emulated queue pair).

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use crate::checker::{Outcome, TraceOp, TraceSink};
use crate::LockMode;

pub mod sr;
pub mod tcp;

pub use sr::{SrLockClient, SrLockServer};
pub use tcp::{TcpLockClient, TcpLockServer};

/// Size of a client/server message on the wire.
pub const MESSAGE_LEN: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageOp {
    AcquireShared = 1,
    AcquireExclusive = 2,
    Release = 3,
    Grant = 4,
    Ack = 5,
    Error = 6,
}

impl MessageOp {
    pub fn from_u8(v: u8) -> Option<MessageOp> {
        Some(match v {
            1 => MessageOp::AcquireShared,
            2 => MessageOp::AcquireExclusive,
            3 => MessageOp::Release,
            4 => MessageOp::Grant,
            5 => MessageOp::Ack,
            6 => MessageOp::Error,
            _ => return None,
        })
    }

    pub fn acquire(mode: LockMode) -> MessageOp {
        match mode {
            LockMode::Shared => MessageOp::AcquireShared,
            LockMode::Exclusive => MessageOp::AcquireExclusive,
        }
    }
}

/// `u8 op | u32 client_id | u32 item_id | u64 request_id`, little-endian.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Message {
    pub op: MessageOp,
    pub client_id: u32,
    pub item_id: u32,
    pub request_id: u64,
}

impl Message {
    pub fn encode(&self) -> [u8; MESSAGE_LEN] {
        let mut b = [0u8; MESSAGE_LEN];
        b[0] = self.op as u8;
        b[1..5].copy_from_slice(&self.client_id.to_le_bytes());
        b[5..9].copy_from_slice(&self.item_id.to_le_bytes());
        b[9..17].copy_from_slice(&self.request_id.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Option<Message> {
        if b.len() != MESSAGE_LEN {
            return None;
        }
        Some(Message {
            op: MessageOp::from_u8(b[0])?,
            client_id: u32::from_le_bytes(b[1..5].try_into().unwrap()),
            item_id: u32::from_le_bytes(b[5..9].try_into().unwrap()),
            request_id: u64::from_le_bytes(b[9..17].try_into().unwrap()),
        })
    }

    fn reply(&self, op: MessageOp) -> Message {
        Message { op, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestOp {
    Acquire,
    Release,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockRequest {
    pub request_id: u64,
    pub client_id: u32,
    pub item_id: u32,
    pub mode: LockMode,
    pub op: RequestOp,
}

impl LockRequest {
    pub fn acquire(client_id: u32, item_id: u32, mode: LockMode, request_id: u64) -> LockRequest {
        LockRequest {
            request_id,
            client_id,
            item_id,
            mode,
            op: RequestOp::Acquire,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("client {client} already has a request or grant on item {item}")]
    DuplicateAcquire { client: u32, item: u32 },
    #[error("client {client} does not hold item {item}")]
    NotHolder { client: u32, item: u32 },
    #[error("unknown item {item} (manager has {n_items})")]
    UnknownItem { item: u32, n_items: u32 },
    #[error("unexpected message {0:?}")]
    UnexpectedMessage(MessageOp),
}

/// Pending requests and current holders of one item.
#[derive(Debug, Clone, Default)]
pub struct ItemQueue {
    pub item_id: u32,
    pending: VecDeque<LockRequest>,
    granted: Vec<(u32, LockMode, u64)>,
    grants_issued: u64,
    releases: u64,
}

impl ItemQueue {
    pub fn new(item_id: u32) -> ItemQueue {
        ItemQueue {
            item_id,
            ..Default::default()
        }
    }

    pub fn pending(&self) -> impl Iterator<Item = &LockRequest> {
        self.pending.iter()
    }

    pub fn granted(&self) -> impl Iterator<Item = (u32, LockMode)> + '_ {
        self.granted.iter().map(|&(c, m, _)| (c, m))
    }

    pub fn grants_issued(&self) -> u64 {
        self.grants_issued
    }

    pub fn releases(&self) -> u64 {
        self.releases
    }

    fn involves(&self, client: u32) -> bool {
        self.granted.iter().any(|g| g.0 == client) || self.pending.iter().any(|r| r.client_id == client)
    }

    /// Grants whatever the queue head allows: an EXCLUSIVE head when nothing
    /// is held, or the maximal run of SHARED requests at the head when no
    /// EXCLUSIVE lock is held. Call with the item's mutex held.
    pub fn grant_scan(&mut self) -> Vec<LockRequest> {
        let mut out = Vec::new();
        let exclusive_held = self.granted.iter().any(|g| g.1 == LockMode::Exclusive);
        match self.pending.front().map(|r| r.mode) {
            Some(LockMode::Exclusive) if self.granted.is_empty() => {
                out.push(self.pending.pop_front().unwrap());
            }
            Some(LockMode::Shared) if !exclusive_held => {
                while self.pending.front().is_some_and(|r| r.mode == LockMode::Shared) {
                    out.push(self.pending.pop_front().unwrap());
                }
            }
            _ => {}
        }
        for r in &out {
            self.granted.push((r.client_id, r.mode, r.request_id));
        }
        self.grants_issued += out.len() as u64;
        out
    }

    /// Queues `req` and returns the requests granted as a result.
    pub fn acquire(&mut self, req: LockRequest) -> Result<Vec<LockRequest>, ProtocolError> {
        if self.involves(req.client_id) {
            return Err(ProtocolError::DuplicateAcquire {
                client: req.client_id,
                item: self.item_id,
            });
        }
        self.pending.push_back(req);
        Ok(self.grant_scan())
    }

    /// Drops `client`'s grant and returns its mode plus the follow-on grants.
    pub fn release(&mut self, client: u32) -> Result<(LockMode, Vec<LockRequest>), ProtocolError> {
        let pos = self
            .granted
            .iter()
            .position(|g| g.0 == client)
            .ok_or(ProtocolError::NotHolder {
                client,
                item: self.item_id,
            })?;
        let (_, mode, _) = self.granted.remove(pos);
        self.releases += 1;
        Ok((mode, self.grant_scan()))
    }
}

/// A message addressed to a connected client.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outgoing {
    pub to: u32,
    pub msg: Message,
}

/// Frontend-independent lock state: one mutex-protected queue per item.
#[derive(Debug)]
pub struct LockManager {
    queues: Box<[Mutex<ItemQueue>]>,
    trace: Option<TraceSink>,
}

impl LockManager {
    pub fn new(n_items: u32, trace: Option<TraceSink>) -> LockManager {
        LockManager {
            queues: (0..n_items).map(|i| Mutex::new(ItemQueue::new(i))).collect(),
            trace,
        }
    }

    pub fn n_items(&self) -> u32 {
        self.queues.len() as u32
    }

    pub fn snapshot(&self, item: u32) -> Option<ItemQueue> {
        self.queues.get(item as usize).map(|q| q.lock().unwrap().clone())
    }

    fn record(&self, client: u32, item: u32, op: TraceOp, mode: LockMode, outcome: Outcome) {
        if let Some(t) = &self.trace {
            t.record(client, item, op, mode, outcome);
        }
    }

    fn queue(&self, item: u32) -> Result<&Mutex<ItemQueue>, ProtocolError> {
        self.queues.get(item as usize).ok_or(ProtocolError::UnknownItem {
            item,
            n_items: self.n_items(),
        })
    }

    fn grants(granted: Vec<LockRequest>) -> impl Iterator<Item = Outgoing> {
        granted.into_iter().map(|r| Outgoing {
            to: r.client_id,
            msg: Message {
                op: MessageOp::Grant,
                client_id: r.client_id,
                item_id: r.item_id,
                request_id: r.request_id,
            },
        })
    }

    pub fn handle_acquire(&self, req: LockRequest) -> Result<Vec<Outgoing>, ProtocolError> {
        let granted = {
            let mut q = self.queue(req.item_id)?.lock().unwrap();
            let granted = q.acquire(req)?;
            self.record(req.client_id, req.item_id, TraceOp::Acquire, req.mode, Outcome::Req);
            for g in &granted {
                self.record(g.client_id, g.item_id, TraceOp::Acquire, g.mode, Outcome::Grant);
            }
            granted
        };
        Ok(Self::grants(granted).collect())
    }

    pub fn handle_release(&self, client: u32, item: u32, request_id: u64) -> Result<Vec<Outgoing>, ProtocolError> {
        let granted = {
            let mut q = self.queue(item)?.lock().unwrap();
            let (mode, granted) = q.release(client)?;
            self.record(client, item, TraceOp::Release, mode, Outcome::Req);
            self.record(client, item, TraceOp::Release, mode, Outcome::Ack);
            for g in &granted {
                self.record(g.client_id, g.item_id, TraceOp::Acquire, g.mode, Outcome::Grant);
            }
            granted
        };
        let ack = Outgoing {
            to: client,
            msg: Message {
                op: MessageOp::Ack,
                client_id: client,
                item_id: item,
                request_id,
            },
        };
        Ok(std::iter::once(ack).chain(Self::grants(granted)).collect())
    }

    /// Processes one inbound message; protocol errors become an ERROR reply
    /// to the sender. Replies are produced after the item mutex is released.
    pub fn handle(&self, msg: Message) -> Vec<Outgoing> {
        let result = match msg.op {
            MessageOp::AcquireShared | MessageOp::AcquireExclusive => {
                let mode = if msg.op == MessageOp::AcquireShared {
                    LockMode::Shared
                } else {
                    LockMode::Exclusive
                };
                self.handle_acquire(LockRequest::acquire(msg.client_id, msg.item_id, mode, msg.request_id))
            }
            MessageOp::Release => self.handle_release(msg.client_id, msg.item_id, msg.request_id),
            other => Err(ProtocolError::UnexpectedMessage(other)),
        };
        result.unwrap_or_else(|_| {
            vec![Outgoing {
                to: msg.client_id,
                msg: msg.reply(MessageOp::Error),
            }]
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frontend {
    Tcp,
    SendRecv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerConfig {
    pub n_items: u32,
    pub frontend: Frontend,
    /// Simulated CPU time per message on the TCP frontend.
    pub per_message_cost: Duration,
    /// Cost per message on the SEND/RECV frontend; one tenth of
    /// `per_message_cost` when unset.
    pub sr_message_cost: Option<Duration>,
    /// Messages processed concurrently (emulated server cores).
    pub worker_limit: usize,
}

impl ServerConfig {
    pub fn new(n_items: u32, frontend: Frontend) -> ServerConfig {
        ServerConfig {
            n_items,
            frontend,
            per_message_cost: Duration::ZERO,
            sr_message_cost: None,
            worker_limit: 4,
        }
    }

    /// Cost charged per message by the configured frontend.
    pub fn message_cost(&self) -> Duration {
        match self.frontend {
            Frontend::Tcp => self.per_message_cost,
            Frontend::SendRecv => self.sr_message_cost.unwrap_or(self.per_message_cost / 10),
        }
    }
}

/// Bounded pool of emulated cores. Each message holds one core while its
/// handler burns the configured cost of thread CPU time.
///
/// The cost is measured on the thread's own CPU clock, so a handler that is
/// preempted mid-message still pays the full amount once it runs again.
#[derive(Debug)]
pub struct WorkerPool {
    free: Mutex<usize>,
    cv: Condvar,
    limit: usize,
    cost: Duration,
}

impl WorkerPool {
    pub fn new(limit: usize, cost: Duration) -> WorkerPool {
        let limit = limit.max(1);
        WorkerPool {
            free: Mutex::new(limit),
            cv: Condvar::new(),
            limit,
            cost,
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn cost(&self) -> Duration {
        self.cost
    }

    pub fn charge(&self) {
        if self.cost.is_zero() {
            return;
        }
        self.with_core(|| burn_cpu(self.cost));
    }

    /// Runs `f` while holding one of the pool's cores.
    pub fn with_core<R>(&self, f: impl FnOnce() -> R) -> R {
        {
            let mut free = self.free.lock().unwrap();
            while *free == 0 {
                free = self.cv.wait(free).unwrap();
            }
            *free -= 1;
        }
        let r = f();
        *self.free.lock().unwrap() += 1;
        self.cv.notify_one();
        r
    }
}

fn thread_cpu_time() -> Duration {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: `ts` is a valid out-pointer and the clock id is a constant.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    assert_eq!(rc, 0, "thread CPU clock unavailable");
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

/// Busy-loops until this thread has used `d` of CPU time.
pub fn burn_cpu(d: Duration) {
    let until = thread_cpu_time() + d;
    while thread_cpu_time() < until {
        std::hint::spin_loop();
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid argument: {0}")]
pub struct InvalidArgument(pub &'static str);

/// Loose upper bound on server throughput in locks per second:
/// `cores * frequency / (cycles_per_message * messages_per_lock)`.
///
/// For 40 cores at 3 GHz, 10^4 cycles per message and one message per lock
/// this is exactly 1.2e7 locks/s. Estimates of roughly 3e7 locks/s quoted
/// for that configuration do not follow from the formula; this function
/// implements the formula.
pub fn upper_bound_throughput(
    cores: f64,
    frequency: f64,
    cycles_per_message: f64,
    messages_per_lock: f64,
) -> Result<f64, InvalidArgument> {
    for (v, name) in [
        (cores, "cores"),
        (frequency, "frequency"),
        (cycles_per_message, "cycles_per_message"),
        (messages_per_lock, "messages_per_lock"),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(InvalidArgument(name));
        }
    }
    Ok(cores * frequency / (cycles_per_message * messages_per_lock))
}

#[cfg(test)]
mod tests {
    use super::*;
    use LockMode::{Exclusive as E, Shared as S};

    #[test]
    fn burn_cpu_consumes_thread_time() {
        let t0 = thread_cpu_time();
        burn_cpu(Duration::from_millis(5));
        assert!(thread_cpu_time() - t0 >= Duration::from_millis(5));
    }

    #[test]
    fn pool_limits_concurrency() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::Arc;
        let pool = Arc::new(WorkerPool::new(2, Duration::from_micros(200)));
        let inside = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let hs: Vec<_> = (0..6)
            .map(|_| {
                let (pool, inside, peak) = (pool.clone(), inside.clone(), peak.clone());
                std::thread::spawn(move || {
                    for _ in 0..20 {
                        pool.with_core(|| {
                            let n = inside.fetch_add(1, Ordering::SeqCst) + 1;
                            peak.fetch_max(n, Ordering::SeqCst);
                            burn_cpu(pool.cost());
                            inside.fetch_sub(1, Ordering::SeqCst);
                        });
                    }
                })
            })
            .collect();
        for h in hs {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= pool.limit());
    }

    fn acq(c: u32, m: LockMode) -> LockRequest {
        LockRequest::acquire(c, 0, m, c as u64)
    }

    fn clients(v: &[LockRequest]) -> Vec<u32> {
        v.iter().map(|r| r.client_id).collect()
    }

    #[test]
    fn message_layout() {
        let m = Message {
            op: MessageOp::AcquireExclusive,
            client_id: 3,
            item_id: 9,
            request_id: 0x0102,
        };
        let b = m.encode();
        assert_eq!(b.len(), 17);
        assert_eq!(b[0], 2);
        assert_eq!(&b[1..5], &[3, 0, 0, 0]);
        assert_eq!(&b[5..9], &[9, 0, 0, 0]);
        assert_eq!(&b[9..17], &[2, 1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(Message::decode(&b), Some(m));
        assert_eq!(Message::decode(&b[..16]), None);
        let mut bad = b;
        bad[0] = 7;
        assert_eq!(Message::decode(&bad), None);
    }

    #[test]
    fn uncontended_exclusive_granted() {
        let mut q = ItemQueue::new(0);
        assert_eq!(clients(&q.acquire(acq(1, E)).unwrap()), vec![1]);
    }

    #[test]
    fn shared_blocked_by_exclusive_holder() {
        let mut q = ItemQueue::new(0);
        q.acquire(acq(1, E)).unwrap();
        assert!(q.acquire(acq(2, S)).unwrap().is_empty());
    }

    #[test]
    fn shared_joins_shared_holders() {
        let mut q = ItemQueue::new(0);
        q.acquire(acq(1, S)).unwrap();
        assert_eq!(clients(&q.acquire(acq(2, S)).unwrap()), vec![2]);
    }

    #[test]
    fn release_grants_shared_prefix() {
        let mut q = ItemQueue::new(0);
        q.acquire(acq(1, E)).unwrap();
        q.acquire(acq(2, S)).unwrap();
        q.acquire(acq(3, S)).unwrap();
        q.acquire(acq(4, E)).unwrap();
        let (mode, g) = q.release(1).unwrap();
        assert_eq!(mode, E);
        assert_eq!(clients(&g), vec![2, 3]);
        assert_eq!(q.pending().map(|r| r.client_id).collect::<Vec<_>>(), vec![4]);

        // c4 waits for both shared holders
        assert!(q.release(2).unwrap().1.is_empty());
        assert_eq!(clients(&q.release(3).unwrap().1), vec![4]);
    }

    #[test]
    fn release_without_hold() {
        let mut q = ItemQueue::new(0);
        assert_eq!(q.release(5), Err(ProtocolError::NotHolder { client: 5, item: 0 }));
        q.acquire(acq(1, E)).unwrap();
        q.acquire(acq(2, E)).unwrap();
        // queued but not granted is not a hold
        assert!(q.release(2).is_err());
    }

    #[test]
    fn duplicate_acquire_rejected() {
        let mut q = ItemQueue::new(0);
        q.acquire(acq(1, S)).unwrap();
        assert!(q.acquire(acq(1, S)).is_err());
        q.acquire(acq(2, E)).unwrap();
        assert!(q.acquire(acq(2, S)).is_err());
    }

    #[test]
    fn grant_scan_examples() {
        let mut q = ItemQueue::new(0);
        q.pending.extend([acq(1, E), acq(2, S)]);
        assert_eq!(clients(&q.grant_scan()), vec![1]);

        let mut q = ItemQueue::new(0);
        q.pending.extend([acq(1, S), acq(2, S), acq(3, E), acq(4, S)]);
        assert_eq!(clients(&q.grant_scan()), vec![1, 2]);

        let mut q = ItemQueue::new(0);
        q.granted.push((9, S, 9));
        q.pending.extend([acq(3, E), acq(4, S)]);
        assert!(q.grant_scan().is_empty());
    }

    #[test]
    fn strict_fifo_queues_shared_behind_waiting_exclusive() {
        let mut q = ItemQueue::new(0);
        q.acquire(acq(1, S)).unwrap();
        assert!(q.acquire(acq(2, E)).unwrap().is_empty());
        assert!(q.acquire(acq(3, S)).unwrap().is_empty());
        assert_eq!(clients(&q.release(1).unwrap().1), vec![2]);
        assert_eq!(clients(&q.release(2).unwrap().1), vec![3]);
    }

    #[test]
    fn manager_replies() {
        let m = LockManager::new(2, None);
        let out = m.handle(Message {
            op: MessageOp::AcquireExclusive,
            client_id: 1,
            item_id: 0,
            request_id: 10,
        });
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].to, 1);
        assert_eq!(out[0].msg.op, MessageOp::Grant);
        assert_eq!(out[0].msg.request_id, 10);

        let out = m.handle(Message {
            op: MessageOp::AcquireShared,
            client_id: 2,
            item_id: 0,
            request_id: 1,
        });
        assert!(out.is_empty());

        let out = m.handle(Message {
            op: MessageOp::Release,
            client_id: 1,
            item_id: 0,
            request_id: 11,
        });
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].to, out[0].msg.op), (1, MessageOp::Ack));
        assert_eq!((out[1].to, out[1].msg.op, out[1].msg.request_id), (2, MessageOp::Grant, 1));

        for bad in [
            Message { op: MessageOp::AcquireShared, client_id: 3, item_id: 2, request_id: 1 },
            Message { op: MessageOp::Release, client_id: 3, item_id: 0, request_id: 2 },
            Message { op: MessageOp::Grant, client_id: 3, item_id: 0, request_id: 3 },
        ] {
            let out = m.handle(bad);
            assert_eq!(out, vec![Outgoing { to: 3, msg: Message { op: MessageOp::Error, ..bad } }]);
        }
        let snap = m.snapshot(0).unwrap();
        assert_eq!(snap.grants_issued() - snap.releases(), snap.granted().count() as u64);
    }

    #[test]
    fn upper_bound_examples() {
        assert_eq!(upper_bound_throughput(40.0, 3e9, 1e4, 1.0), Ok(1.2e7));
        assert_eq!(upper_bound_throughput(1.0, 1.0, 1.0, 1.0), Ok(1.0));
        assert_eq!(upper_bound_throughput(40.0, 3e9, 1e4, 2.0), Ok(6e6));
        assert!(upper_bound_throughput(0.0, 3e9, 1e4, 1.0).is_err());
        assert!(upper_bound_throughput(40.0, 3e9, 0.0, 1.0).is_err());
    }

    #[test]
    fn sr_cost_defaults_to_a_tenth() {
        let mut c = ServerConfig::new(1, Frontend::SendRecv);
        c.per_message_cost = Duration::from_micros(20);
        assert_eq!(c.message_cost(), Duration::from_micros(2));
        c.sr_message_cost = Some(Duration::from_micros(5));
        assert_eq!(c.message_cost(), Duration::from_micros(5));
        c.frontend = Frontend::Tcp;
        assert_eq!(c.message_cost(), Duration::from_micros(20));
    }
}
