//! TCP frontend: one long-lived connection and one handler thread per
//! client. Frames are `u32 length | message`. On connect the server sends an
//! ACK whose `client_id` field carries the ID assigned to the connection.

use std::collections::HashMap;
use std::io::{self, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};

use super::{LockManager, Message, MessageOp, ServerConfig, WorkerPool, MESSAGE_LEN};
use crate::checker::TraceSink;
use crate::locktable::MAX_CLIENTS;
use crate::{LockClient, LockMode};

type Routes = Arc<RwLock<HashMap<u32, Arc<Mutex<TcpStream>>>>>;

fn write_frame(w: &mut impl Write, msg: &Message) -> io::Result<()> {
    let mut buf = [0u8; 4 + MESSAGE_LEN];
    buf[..4].copy_from_slice(&(MESSAGE_LEN as u32).to_le_bytes());
    buf[4..].copy_from_slice(&msg.encode());
    w.write_all(&buf)?;
    w.flush()
}

fn read_frame(r: &mut impl Read) -> io::Result<Option<Message>> {
    let mut len = [0u8; 4];
    if !crate::verbs::wire::read_exact_or_eof(r, &mut len)? {
        return Ok(None);
    }
    let len = u32::from_le_bytes(len) as usize;
    if len != MESSAGE_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, format!("bad frame length {len}")));
    }
    let mut body = [0u8; MESSAGE_LEN];
    r.read_exact(&mut body)?;
    Message::decode(&body)
        .map(Some)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad message"))
}

/// Centralized lock manager behind a TCP listener.
pub struct TcpLockServer {
    addr: SocketAddr,
    manager: Arc<LockManager>,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl TcpLockServer {
    pub fn start(cfg: ServerConfig, addr: impl ToSocketAddrs, trace: Option<TraceSink>) -> io::Result<TcpLockServer> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let manager = Arc::new(LockManager::new(cfg.n_items, trace));
        let pool = Arc::new(WorkerPool::new(cfg.worker_limit, cfg.message_cost()));
        let stop = Arc::new(AtomicBool::new(false));
        let routes: Routes = Arc::default();
        let next_id = AtomicU32::new(1);
        let acceptor = {
            let manager = Arc::clone(&manager);
            let stop = Arc::clone(&stop);
            thread::Builder::new().name("lock-server-accept".into()).spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(stream) = stream else { continue };
                    let id = next_id.fetch_add(1, Ordering::Relaxed);
                    if id > MAX_CLIENTS {
                        continue;
                    }
                    let manager = Arc::clone(&manager);
                    let pool = Arc::clone(&pool);
                    let routes = Arc::clone(&routes);
                    let _ = thread::Builder::new()
                        .name(format!("lock-conn-{id}"))
                        .spawn(move || {
                            let _ = serve_connection(id, stream, &manager, &pool, &routes);
                            routes.write().unwrap().remove(&id);
                        });
                }
            })?
        };
        Ok(TcpLockServer {
            addr,
            manager,
            stop,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn manager(&self) -> &Arc<LockManager> {
        &self.manager
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpLockServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve_connection(
    id: u32,
    stream: TcpStream,
    manager: &LockManager,
    pool: &WorkerPool,
    routes: &Routes,
) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    routes.write().unwrap().insert(id, Arc::clone(&writer));
    let welcome = Message {
        op: MessageOp::Ack,
        client_id: id,
        item_id: 0,
        request_id: 0,
    };
    write_frame(&mut *writer.lock().unwrap(), &welcome)?;

    let mut reader = BufReader::new(stream);
    while let Some(msg) = read_frame(&mut reader)? {
        pool.charge();
        let replies = if msg.client_id != id {
            vec![super::Outgoing {
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
                // a dead peer only affects its own connection
                let _ = write_frame(&mut *dest.lock().unwrap(), &out.msg);
            }
        }
    }
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum ServerClientError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("server rejected {op:?} on item {item}")]
    Rejected { op: MessageOp, item: u32 },
    #[error("unexpected reply {0:?}")]
    UnexpectedReply(Message),
    #[error("link failure: {0}")]
    Link(String),
}

/// Blocking client of [`TcpLockServer`].
#[derive(Debug)]
pub struct TcpLockClient {
    client_id: u32,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_request: u64,
}

impl TcpLockClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<TcpLockClient, ServerClientError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let welcome = read_frame(&mut reader)?
            .ok_or_else(|| io::Error::from(io::ErrorKind::UnexpectedEof))?;
        if welcome.op != MessageOp::Ack || welcome.client_id == 0 {
            return Err(ServerClientError::UnexpectedReply(welcome));
        }
        Ok(TcpLockClient {
            client_id: welcome.client_id,
            reader,
            writer: stream,
            next_request: 1,
        })
    }

    fn call(&mut self, op: MessageOp, item: u32, expect: MessageOp) -> Result<(), ServerClientError> {
        let msg = Message {
            op,
            client_id: self.client_id,
            item_id: item,
            request_id: self.next_request,
        };
        self.next_request += 1;
        write_frame(&mut self.writer, &msg)?;
        let reply = read_frame(&mut self.reader)?.ok_or_else(|| io::Error::from(io::ErrorKind::UnexpectedEof))?;
        check_reply(&msg, reply, expect)
    }
}

pub(crate) fn check_reply(sent: &Message, reply: Message, expect: MessageOp) -> Result<(), ServerClientError> {
    if reply.request_id != sent.request_id || reply.item_id != sent.item_id {
        return Err(ServerClientError::UnexpectedReply(reply));
    }
    match reply.op {
        op if op == expect => Ok(()),
        MessageOp::Error => Err(ServerClientError::Rejected {
            op: sent.op,
            item: sent.item_id,
        }),
        _ => Err(ServerClientError::UnexpectedReply(reply)),
    }
}

impl LockClient for TcpLockClient {
    type Error = ServerClientError;

    fn client_id(&self) -> u32 {
        self.client_id
    }

    fn lock(&mut self, item: u32, mode: LockMode) -> Result<(), ServerClientError> {
        self.call(MessageOp::acquire(mode), item, MessageOp::Grant)
    }

    fn unlock(&mut self, item: u32, _mode: LockMode) -> Result<(), ServerClientError> {
        self.call(MessageOp::Release, item, MessageOp::Ack)
    }
}
