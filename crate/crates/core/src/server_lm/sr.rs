//! SEND/RECV frontend: each client message is one SEND on the client's
//! queue pair. Clients post a RECEIVE for the reply before sending a
//! request; the server keeps a few RECEIVEs posted per connection.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::tcp::{check_reply, ServerClientError};
use super::{LockManager, Message, MessageOp, Outgoing, ServerConfig, WorkerPool, MESSAGE_LEN};
use crate::checker::TraceSink;
use crate::verbs::{Completion, Node, QueuePair, Status};
use crate::{LockClient, LockMode};

const RECV_DEPTH: usize = 4;
const POLL_INTERVAL: Duration = Duration::from_millis(20);
const REPLY_TIMEOUT: Duration = Duration::from_secs(60);
/// How long a sender keeps retrying a SEND that hit receiver-not-ready.
const RNR_TIMEOUT: Duration = Duration::from_secs(5);

type Routes = Arc<RwLock<HashMap<u32, Arc<QueuePair>>>>;

/// SEND that retries while the receiver has no RECEIVE posted.
fn send_retrying(qp: &QueuePair, payload: &[u8]) -> Completion {
    let deadline = Instant::now() + RNR_TIMEOUT;
    loop {
        let c = qp.send(payload);
        if c.status != Status::ReceiverNotReady || Instant::now() >= deadline {
            return c;
        }
        thread::yield_now();
    }
}

/// Centralized lock manager serving queue pairs accepted on a [`Node`].
pub struct SrLockServer {
    manager: Arc<LockManager>,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    handlers: Arc<std::sync::Mutex<Vec<JoinHandle<()>>>>,
}

impl SrLockServer {
    pub fn start(cfg: ServerConfig, node: Arc<Node>, trace: Option<TraceSink>) -> std::io::Result<SrLockServer> {
        let manager = Arc::new(LockManager::new(cfg.n_items, trace));
        let pool = Arc::new(WorkerPool::new(cfg.worker_limit, cfg.message_cost()));
        let stop = Arc::new(AtomicBool::new(false));
        let routes: Routes = Arc::default();
        let handlers: Arc<std::sync::Mutex<Vec<JoinHandle<()>>>> = Arc::default();
        let acceptor = {
            let manager = Arc::clone(&manager);
            let stop = Arc::clone(&stop);
            let handlers = Arc::clone(&handlers);
            thread::Builder::new().name("sr-server-accept".into()).spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let Some(qp) = node.accept_timeout(POLL_INTERVAL) else { continue };
                    let qp = Arc::new(qp);
                    routes.write().unwrap().insert(qp.peer_id(), Arc::clone(&qp));
                    let manager = Arc::clone(&manager);
                    let pool = Arc::clone(&pool);
                    let routes = Arc::clone(&routes);
                    let stop = Arc::clone(&stop);
                    let h = thread::Builder::new()
                        .name(format!("sr-conn-{}", qp.peer_id()))
                        .spawn(move || serve_qp(&qp, &manager, &pool, &routes, &stop));
                    if let Ok(h) = h {
                        handlers.lock().unwrap().push(h);
                    }
                }
            })?
        };
        Ok(SrLockServer {
            manager,
            stop,
            acceptor: Some(acceptor),
            handlers,
        })
    }

    pub fn manager(&self) -> &Arc<LockManager> {
        &self.manager
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        for h in self.handlers.lock().unwrap().drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for SrLockServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_qp(qp: &QueuePair, manager: &LockManager, pool: &WorkerPool, routes: &Routes, stop: &AtomicBool) {
    let id = qp.peer_id();
    for _ in 0..RECV_DEPTH {
        qp.post_recv(MESSAGE_LEN);
    }
    while !stop.load(Ordering::SeqCst) {
        let Some(c) = qp.wait_recv(POLL_INTERVAL) else { continue };
        qp.post_recv(MESSAGE_LEN);
        if !c.is_success() {
            continue;
        }
        let Some(msg) = Message::decode(&c.payload) else { continue };
        pool.charge();
        let replies = if msg.client_id != id {
            vec![Outgoing {
                to: id,
                msg: Message { op: MessageOp::Error, ..msg },
            }]
        } else {
            manager.handle(msg)
        };
        for out in replies {
            pool.charge();
            let dest = routes.read().unwrap().get(&out.to).cloned();
            if let Some(dest) = dest {
                send_retrying(&dest, &out.msg.encode());
            }
        }
    }
}

/// Blocking client of [`SrLockServer`] over a connected queue pair.
#[derive(Debug)]
pub struct SrLockClient {
    qp: QueuePair,
    next_request: u64,
}

impl SrLockClient {
    pub fn new(qp: QueuePair) -> SrLockClient {
        SrLockClient { qp, next_request: 1 }
    }

    fn call(&mut self, op: MessageOp, item: u32, expect: MessageOp) -> Result<(), ServerClientError> {
        let msg = Message {
            op,
            client_id: self.qp.peer_id(),
            item_id: item,
            request_id: self.next_request,
        };
        self.next_request += 1;
        self.qp.post_recv(MESSAGE_LEN);
        let c = send_retrying(&self.qp, &msg.encode());
        if !c.is_success() {
            return Err(ServerClientError::Link(c.status.to_string()));
        }
        let reply = self
            .qp
            .wait_recv(REPLY_TIMEOUT)
            .ok_or_else(|| ServerClientError::Link("no reply".into()))?;
        if !reply.is_success() {
            return Err(ServerClientError::Link(reply.status.to_string()));
        }
        let reply = Message::decode(&reply.payload).ok_or_else(|| ServerClientError::Link("bad reply".into()))?;
        check_reply(&msg, reply, expect)
    }
}

impl LockClient for SrLockClient {
    type Error = ServerClientError;

    fn client_id(&self) -> u32 {
        self.qp.peer_id()
    }

    fn lock(&mut self, item: u32, mode: LockMode) -> Result<(), ServerClientError> {
        self.call(MessageOp::acquire(mode), item, MessageOp::Grant)
    }

    fn unlock(&mut self, item: u32, _mode: LockMode) -> Result<(), ServerClientError> {
        self.call(MessageOp::Release, item, MessageOp::Ack)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::server_lm::Frontend;

    #[test]
    fn lock_unlock_over_send_recv() {
        let node = Node::new();
        let srv = SrLockServer::start(ServerConfig::new(2, Frontend::SendRecv), Arc::clone(&node), None).unwrap();
        let mut a = SrLockClient::new(node.connect_local(Duration::ZERO).unwrap());
        let mut b = SrLockClient::new(node.connect_local(Duration::ZERO).unwrap());
        a.lock(0, LockMode::Shared).unwrap();
        b.lock(0, LockMode::Shared).unwrap();
        let h = thread::spawn(move || {
            a.lock(1, LockMode::Exclusive).unwrap();
            a
        });
        let mut a = h.join().unwrap();
        a.unlock(0, LockMode::Shared).unwrap();
        b.unlock(0, LockMode::Shared).unwrap();
        a.unlock(1, LockMode::Exclusive).unwrap();
        assert!(matches!(b.unlock(1, LockMode::Exclusive), Err(ServerClientError::Rejected { .. })));
        let snap = srv.manager().snapshot(0).unwrap();
        assert_eq!(snap.grants_issued(), 2);
        assert_eq!(snap.releases(), 2);
    }
}
