//! TCP-emulated link.
//!
//! A connection uses two sockets. On the forward socket the connecting peer
//! posts verb frames that the node's agent executes; on the reverse socket
//! the node posts frames (SENDs) that a small agent in the peer executes
//! against the peer's receive queue. Connection setup exchanges the peer ID,
//! a pairing token and the exported regions, the way real RDMA applications
//! exchange queue-pair metadata out of band.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::qp::{Endpoint, Link, QueuePair};
use super::region::Node;
use super::wire::{write_all_flush, ReplyFrame, VerbFrame};
use super::{RegionId, RemoteRegion, Status, VerbError};

const ROLE_FORWARD: u8 = 0;
const ROLE_REVERSE: u8 = 1;
const ACK: u8 = 1;

struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpLink {
    fn new(stream: TcpStream) -> io::Result<TcpLink> {
        Ok(TcpLink {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    fn round_trip(&mut self, frame: &VerbFrame) -> io::Result<ReplyFrame> {
        write_all_flush(&mut self.writer, &frame.encode())?;
        ReplyFrame::read_from(&mut self.reader)
    }
}

impl Link for TcpLink {
    fn transmit(&mut self, frame: &VerbFrame) -> ReplyFrame {
        self.round_trip(frame)
            .unwrap_or_else(|_| ReplyFrame::status(Status::TransportError))
    }
}

/// Executes frames from `stream` against `endpoint` until the peer hangs up.
fn serve(stream: TcpStream, endpoint: Arc<Endpoint>) {
    let Ok(read_half) = stream.try_clone() else {
        return;
    };
    let mut reader = BufReader::new(read_half);
    let mut writer = BufWriter::new(stream);
    loop {
        match VerbFrame::read_from(&mut reader) {
            Ok(Some(frame)) => {
                let reply = endpoint.execute(&frame);
                if write_all_flush(&mut writer, &reply.encode()).is_err() {
                    return;
                }
            }
            Ok(None) => return,
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                let _ = write_all_flush(&mut writer, &ReplyFrame::status(Status::InvalidRequest).encode());
                return;
            }
            Err(_) => return,
        }
    }
}

struct AgentShared {
    node: Arc<Node>,
    pending: Mutex<HashMap<u64, (TcpStream, u32)>>,
    next_token: AtomicU64,
    stop: AtomicBool,
}

/// Node-side agent accepting TCP-emulated connections; stands in for the
/// passive host's RNIC.
pub struct TcpAgent {
    addr: SocketAddr,
    shared: Arc<AgentShared>,
    acceptor: Option<JoinHandle<()>>,
}

impl TcpAgent {
    /// Starts serving `node` on `addr` (use port 0 for an ephemeral port).
    pub fn start(node: Arc<Node>, addr: impl ToSocketAddrs) -> io::Result<TcpAgent> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(AgentShared {
            node,
            pending: Mutex::new(HashMap::new()),
            next_token: AtomicU64::new(1),
            stop: AtomicBool::new(false),
        });
        let acceptor = {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name("rnic-agent".into())
                .spawn(move || {
                    for stream in listener.incoming() {
                        if shared.stop.load(Ordering::SeqCst) {
                            break;
                        }
                        let Ok(stream) = stream else { continue };
                        let shared = Arc::clone(&shared);
                        thread::spawn(move || {
                            let _ = handshake(&shared, stream);
                        });
                    }
                })?
        };
        Ok(TcpAgent {
            addr,
            shared,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn node(&self) -> &Arc<Node> {
        &self.shared.node
    }

    /// Stops accepting new connections. Established connections keep running
    /// until their peers disconnect.
    pub fn shutdown(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for TcpAgent {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn handshake(shared: &AgentShared, mut stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut hello = [0u8; 9];
    stream.read_exact(&mut hello)?;
    let token = u64::from_le_bytes(hello[1..9].try_into().unwrap());
    match hello[0] {
        ROLE_FORWARD => {
            let peer_id = match shared.node.assign_peer_id() {
                Ok(id) => id,
                Err(_) => {
                    // peer id 0 signals refusal
                    stream.write_all(&[0u8; 16])?;
                    return Ok(());
                }
            };
            let token = shared.next_token.fetch_add(1, Ordering::Relaxed);
            let regions = shared.node.exported();
            let mut reply = Vec::with_capacity(16 + regions.len() * 12);
            reply.extend_from_slice(&peer_id.to_le_bytes());
            reply.extend_from_slice(&token.to_le_bytes());
            reply.extend_from_slice(&(regions.len() as u32).to_le_bytes());
            for r in &regions {
                reply.extend_from_slice(&r.id.0.to_le_bytes());
                reply.extend_from_slice(&r.len.to_le_bytes());
            }
            shared
                .pending
                .lock()
                .unwrap()
                .insert(token, (stream.try_clone()?, peer_id));
            stream.write_all(&reply)?;
            Ok(())
        }
        ROLE_REVERSE => {
            let Some((forward, peer_id)) = shared.pending.lock().unwrap().remove(&token) else {
                return Err(io::Error::new(io::ErrorKind::InvalidData, "unknown pairing token"));
            };
            let host_ep = Endpoint::new(Arc::clone(&shared.node));
            let link = TcpLink::new(stream.try_clone()?)?;
            let qp = QueuePair::new(Arc::clone(&host_ep), Box::new(link), Duration::ZERO, peer_id, Vec::new());
            thread::Builder::new()
                .name(format!("rnic-qp-{peer_id}"))
                .spawn(move || serve(forward, host_ep))?;
            stream.write_all(&[ACK])?;
            shared.node.deliver_accepted(qp);
            Ok(())
        }
        _ => Err(io::Error::new(io::ErrorKind::InvalidData, "unknown role")),
    }
}

impl QueuePair {
    /// Connects to a [`TcpAgent`]. `latency` is charged on each direction of
    /// every verb this side posts, on top of the real socket cost.
    pub fn connect_tcp(addr: impl ToSocketAddrs, latency: Duration) -> Result<QueuePair, VerbError> {
        let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
        let mut forward = TcpStream::connect(&addrs[..])?;
        forward.set_nodelay(true)?;
        let mut hello = [0u8; 9];
        hello[0] = ROLE_FORWARD;
        forward.write_all(&hello)?;

        let mut hdr = [0u8; 16];
        forward.read_exact(&mut hdr)?;
        let peer_id = u32::from_le_bytes(hdr[0..4].try_into().unwrap());
        if peer_id == 0 {
            return Err(VerbError::Handshake("node refused the connection".into()));
        }
        let token = u64::from_le_bytes(hdr[4..12].try_into().unwrap());
        let n = u32::from_le_bytes(hdr[12..16].try_into().unwrap());
        let mut regions = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let mut r = [0u8; 12];
            forward.read_exact(&mut r)?;
            regions.push(RemoteRegion {
                id: RegionId(u32::from_le_bytes(r[0..4].try_into().unwrap())),
                len: u64::from_le_bytes(r[4..12].try_into().unwrap()),
            });
        }

        let mut reverse = TcpStream::connect(&addrs[..])?;
        reverse.set_nodelay(true)?;
        hello[0] = ROLE_REVERSE;
        hello[1..9].copy_from_slice(&token.to_le_bytes());
        reverse.write_all(&hello)?;
        let mut ack = [0u8; 1];
        reverse.read_exact(&mut ack)?;
        if ack[0] != ACK {
            return Err(VerbError::Handshake("bad pairing acknowledgement".into()));
        }

        let local = Endpoint::new(Node::new());
        {
            let local = Arc::clone(&local);
            thread::Builder::new()
                .name(format!("rnic-peer-{peer_id}"))
                .spawn(move || serve(reverse, local))?;
        }
        Ok(QueuePair::new(
            local,
            Box::new(TcpLink::new(forward)?),
            latency,
            peer_id,
            regions,
        ))
    }
}
