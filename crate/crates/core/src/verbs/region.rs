use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};

use super::qp::{Endpoint, LocalLink, QueuePair};
use super::{RegionId, RemoteRegion, Status, VerbError};

/// Backing store of a registered region.
///
/// Bytes live in 8-byte atomic words. Every verb that touches a word does so
/// through a single atomic instruction on that word (a load, a store, a
/// fetch-add, or a compare-exchange loop for partial writes), so each word is
/// its own atomicity domain and all effects on it are linearizable.
pub(crate) struct RegionMemory {
    words: Box<[AtomicU64]>,
    len: u64,
}

impl RegionMemory {
    fn new(len: u64) -> Self {
        let n = len.div_ceil(8) as usize;
        let words = (0..n).map(|_| AtomicU64::new(0)).collect();
        RegionMemory { words, len }
    }

    fn check_range(&self, offset: u64, len: u64) -> Result<(), Status> {
        match offset.checked_add(len) {
            Some(end) if len > 0 && end <= self.len => Ok(()),
            _ => Err(Status::LocalAccessError),
        }
    }

    fn atomic_word(&self, offset: u64) -> Result<&AtomicU64, Status> {
        if !offset.is_multiple_of(8) {
            return Err(Status::LocalAccessError);
        }
        self.check_range(offset, 8)?;
        Ok(&self.words[(offset / 8) as usize])
    }

    pub(crate) fn compare_swap(&self, offset: u64, expected: u64, swap: u64) -> Result<u64, Status> {
        let word = self.atomic_word(offset)?;
        Ok(match word.compare_exchange(expected, swap, Ordering::SeqCst, Ordering::SeqCst) {
            Ok(old) | Err(old) => old,
        })
    }

    pub(crate) fn fetch_add(&self, offset: u64, addend: u64) -> Result<u64, Status> {
        // AtomicU64::fetch_add wraps modulo 2^64.
        Ok(self.atomic_word(offset)?.fetch_add(addend, Ordering::SeqCst))
    }

    pub(crate) fn read(&self, offset: u64, len: u64) -> Result<Vec<u8>, Status> {
        self.check_range(offset, len)?;
        let mut out = Vec::with_capacity(len as usize);
        let end = offset + len;
        let mut pos = offset;
        while pos < end {
            let w = pos / 8;
            let lo = (pos % 8) as usize;
            let hi = ((end - w * 8).min(8)) as usize;
            let bytes = self.words[w as usize].load(Ordering::SeqCst).to_le_bytes();
            out.extend_from_slice(&bytes[lo..hi]);
            pos = w * 8 + hi as u64;
        }
        Ok(out)
    }

    pub(crate) fn write(&self, offset: u64, payload: &[u8]) -> Result<(), Status> {
        let len = payload.len() as u64;
        self.check_range(offset, len)?;
        let end = offset + len;
        let mut pos = offset;
        while pos < end {
            let w = pos / 8;
            let lo = (pos % 8) as usize;
            let hi = ((end - w * 8).min(8)) as usize;
            let src = &payload[(pos - offset) as usize..(pos - offset) as usize + (hi - lo)];
            let word = &self.words[w as usize];
            if lo == 0 && hi == 8 {
                word.store(u64::from_le_bytes(src.try_into().unwrap()), Ordering::SeqCst);
            } else {
                // Partial word: read-modify-write inside the word's atomicity
                // domain so concurrent CAS/FA on the other bytes are preserved.
                let _ = word.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |old| {
                    let mut bytes = old.to_le_bytes();
                    bytes[lo..hi].copy_from_slice(src);
                    Some(u64::from_le_bytes(bytes))
                });
            }
            pos = w * 8 + hi as u64;
        }
        Ok(())
    }
}

/// A region registered on a [`Node`], as seen by its owner.
#[derive(Clone)]
pub struct MemoryRegion {
    id: RegionId,
    mem: Arc<RegionMemory>,
}

impl std::fmt::Debug for MemoryRegion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryRegion")
            .field("id", &self.id)
            .field("len", &self.mem.len)
            .finish()
    }
}

impl MemoryRegion {
    pub fn id(&self) -> RegionId {
        self.id
    }

    pub fn len(&self) -> u64 {
        self.mem.len
    }

    pub fn is_empty(&self) -> bool {
        self.mem.len == 0
    }

    /// Handle to give to peers.
    pub fn remote(&self) -> RemoteRegion {
        RemoteRegion {
            id: self.id,
            len: self.mem.len,
        }
    }

    /// Local atomic load of the aligned word at `offset`.
    pub fn load_u64(&self, offset: u64) -> Result<u64, Status> {
        Ok(self.mem.atomic_word(offset)?.load(Ordering::SeqCst))
    }

    /// Local atomic store of the aligned word at `offset`.
    pub fn store_u64(&self, offset: u64, value: u64) -> Result<(), Status> {
        self.mem.atomic_word(offset)?.store(value, Ordering::SeqCst);
        Ok(())
    }

    /// Local byte snapshot with the same atomicity as a remote READ.
    pub fn read_bytes(&self, offset: u64, len: u64) -> Result<Vec<u8>, Status> {
        self.mem.read(offset, len)
    }
}

/// Upper bound on peers a node hands out identifiers to.
pub const MAX_PEERS: u32 = 1 << 16;

/// A host with registered memory that peers can connect to.
pub struct Node {
    regions: RwLock<HashMap<RegionId, Arc<RegionMemory>>>,
    exported: RwLock<Vec<RemoteRegion>>,
    next_region: AtomicU32,
    next_peer: AtomicU32,
    accept_tx: Sender<QueuePair>,
    accept_rx: Receiver<QueuePair>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("regions", &self.regions.read().unwrap().len())
            .field("peers", &self.next_peer.load(Ordering::Relaxed))
            .finish()
    }
}

impl Node {
    pub fn new() -> Arc<Node> {
        let (accept_tx, accept_rx) = crossbeam_channel::unbounded();
        Arc::new(Node {
            regions: RwLock::new(HashMap::new()),
            exported: RwLock::new(Vec::new()),
            next_region: AtomicU32::new(1),
            next_peer: AtomicU32::new(1),
            accept_tx,
            accept_rx,
        })
    }

    /// Registers a zero-initialized region of `len` bytes.
    pub fn register_region(&self, len: u64) -> Result<MemoryRegion, VerbError> {
        if len == 0 {
            return Err(VerbError::InvalidArgument("region length must be positive"));
        }
        let id = RegionId(self.next_region.fetch_add(1, Ordering::Relaxed));
        let mem = Arc::new(RegionMemory::new(len));
        self.regions.write().unwrap().insert(id, Arc::clone(&mem));
        Ok(MemoryRegion { id, mem })
    }

    /// Advertises `region` to peers during connection setup.
    pub fn export(&self, region: &MemoryRegion) {
        self.exported.write().unwrap().push(region.remote());
    }

    pub fn exported(&self) -> Vec<RemoteRegion> {
        self.exported.read().unwrap().clone()
    }

    pub(crate) fn lookup(&self, id: RegionId) -> Option<Arc<RegionMemory>> {
        self.regions.read().unwrap().get(&id).cloned()
    }

    /// Hands out the next dense peer identifier, starting at 1.
    pub(crate) fn assign_peer_id(&self) -> Result<u32, VerbError> {
        let id = self.next_peer.fetch_add(1, Ordering::Relaxed);
        if id > MAX_PEERS {
            return Err(VerbError::ClientLimit(MAX_PEERS));
        }
        Ok(id)
    }

    pub(crate) fn deliver_accepted(&self, qp: QueuePair) {
        let _ = self.accept_tx.send(qp);
    }

    /// Connects an in-process peer. Returns the peer's queue pair; the
    /// node-side half is delivered through [`Node::accept`].
    pub fn connect_local(self: &Arc<Self>, latency: Duration) -> Result<QueuePair, VerbError> {
        let peer_id = self.assign_peer_id()?;
        let client_ep = Endpoint::new(Node::new());
        let host_ep = Endpoint::new(Arc::clone(self));
        let host_qp = QueuePair::new(
            Arc::clone(&host_ep),
            Box::new(LocalLink::new(Arc::clone(&client_ep))),
            latency,
            peer_id,
            Vec::new(),
        );
        let client_qp = QueuePair::new(
            client_ep,
            Box::new(LocalLink::new(host_ep)),
            latency,
            peer_id,
            self.exported(),
        );
        self.deliver_accepted(host_qp);
        Ok(client_qp)
    }

    /// Next node-side queue pair created by a peer connection.
    pub fn accept(&self) -> Option<QueuePair> {
        self.accept_rx.recv().ok()
    }

    pub fn accept_timeout(&self, timeout: Duration) -> Option<QueuePair> {
        self.accept_rx.recv_timeout(timeout).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_region_zeroed() {
        let node = Node::new();
        let mr = node.register_region(800).unwrap();
        assert_eq!(mr.len(), 800);
        assert_eq!(mr.read_bytes(0, 800).unwrap(), vec![0u8; 800]);
        let one = node.register_region(8).unwrap();
        assert_eq!(one.len(), 8);
        assert_eq!(one.load_u64(0).unwrap(), 0);
        assert_ne!(one.id(), mr.id());
    }

    #[test]
    fn register_zero_length_rejected() {
        let node = Node::new();
        assert!(matches!(node.register_region(0), Err(VerbError::InvalidArgument(_))));
    }

    #[test]
    fn unaligned_region_length_bounds() {
        let node = Node::new();
        let mr = node.register_region(13).unwrap();
        mr.mem.write(9, &[1, 2, 3, 4]).unwrap();
        assert_eq!(mr.read_bytes(8, 5).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(mr.mem.write(10, &[0; 4]), Err(Status::LocalAccessError));
        // the trailing word is only partly inside the region
        assert_eq!(mr.mem.fetch_add(8, 1), Err(Status::LocalAccessError));
    }

    #[test]
    fn cross_word_read_write() {
        let node = Node::new();
        let mr = node.register_region(24).unwrap();
        let data: Vec<u8> = (1..=12).collect();
        mr.mem.write(6, &data).unwrap();
        assert_eq!(mr.read_bytes(6, 12).unwrap(), data);
        assert_eq!(mr.read_bytes(0, 6).unwrap(), vec![0; 6]);
        assert_eq!(mr.load_u64(8).unwrap().to_le_bytes(), [3, 4, 5, 6, 7, 8, 9, 10]);
    }

    #[test]
    fn peer_ids_are_dense() {
        let node = Node::new();
        assert_eq!(node.assign_peer_id().unwrap(), 1);
        assert_eq!(node.assign_peer_id().unwrap(), 2);
    }
}
