//! Lock table: one 64-bit lock word per item in a registered region.
//!
//! A word is stored little-endian. Bytes 0..4 hold the shared count (low 32
//! bits) and bytes 4..8 hold the exclusive owner's client ID (high 32 bits),
//! so the exclusive half of item `i` is the 4 bytes at `8 * i + 4`.

use std::fmt;
use std::sync::Arc;

use crate::verbs::{self, MemoryRegion, Node, RemoteRegion, VerbError};

pub const WORD_BYTES: u64 = 8;

/// Byte offset of the exclusive-owner half inside a lock word.
pub const EXCLUSIVE_HALF_OFFSET: u64 = 4;

/// Largest number of clients a table may serve. Keeps the shared count far
/// from the 2^32 boundary where FA(+1) would carry into the owner half.
pub const MAX_CLIENTS: u32 = verbs::MAX_PEERS;

/// FA addend that decrements the shared count by one (2^64 - 1).
pub const DECREMENT: u64 = u64::MAX;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum LockTableError {
    #[error("item {item} out of range (table holds {item_count} items)")]
    ItemOutOfRange { item: u32, item_count: u32 },
    #[error("lock table needs at least one item")]
    Empty,
    #[error("region of {region_len} bytes cannot hold {item_count} lock words")]
    RegionTooSmall { region_len: u64, item_count: u32 },
}

/// A decoded lock word.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LockWord(u64);

impl LockWord {
    pub const UNLOCKED: LockWord = LockWord(0);

    pub const fn encode(owner: u32, shared: u32) -> LockWord {
        LockWord(((owner as u64) << 32) | shared as u64)
    }

    pub const fn from_raw(raw: u64) -> LockWord {
        LockWord(raw)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    pub const fn decode(self) -> (u32, u32) {
        (self.owner(), self.shared_count())
    }

    /// Exclusive owner, 0 when nobody holds the lock exclusively.
    pub const fn owner(self) -> u32 {
        (self.0 >> 32) as u32
    }

    pub const fn shared_count(self) -> u32 {
        self.0 as u32
    }

    pub const fn is_unlocked(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Debug for LockWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}|{})", self.owner(), self.shared_count())
    }
}

impl From<u64> for LockWord {
    fn from(raw: u64) -> Self {
        LockWord(raw)
    }
}

/// Byte offset of item `item`'s word in a table of `item_count` words.
pub fn word_offset(item: u32, item_count: u32) -> Result<u64, LockTableError> {
    if item >= item_count {
        return Err(LockTableError::ItemOutOfRange { item, item_count });
    }
    Ok(WORD_BYTES * item as u64)
}

/// Host-side lock table.
#[derive(Debug, Clone)]
pub struct LockTable {
    region: MemoryRegion,
    item_count: u32,
}

impl LockTable {
    /// Registers an all-zero table of `item_count` words on `node` and
    /// exports it to connecting peers.
    pub fn create(node: &Arc<Node>, item_count: u32) -> Result<LockTable, LockTableCreateError> {
        if item_count == 0 {
            return Err(LockTableError::Empty.into());
        }
        let region = node.register_region(WORD_BYTES * item_count as u64)?;
        node.export(&region);
        Ok(LockTable { region, item_count })
    }

    pub fn item_count(&self) -> u32 {
        self.item_count
    }

    pub fn region(&self) -> &MemoryRegion {
        &self.region
    }

    pub fn handle(&self) -> LockTableHandle {
        LockTableHandle {
            region: self.region.remote(),
            item_count: self.item_count,
        }
    }

    /// Current value of item `item`'s word.
    pub fn word(&self, item: u32) -> Result<LockWord, LockTableError> {
        let off = word_offset(item, self.item_count)?;
        Ok(LockWord(self.region.load_u64(off).expect("offset checked")))
    }

    pub fn words(&self) -> Vec<LockWord> {
        (0..self.item_count).map(|i| self.word(i).unwrap()).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LockTableCreateError {
    #[error(transparent)]
    Table(#[from] LockTableError),
    #[error(transparent)]
    Verbs(#[from] VerbError),
}

/// What a client needs to address a remote lock table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LockTableHandle {
    region: RemoteRegion,
    item_count: u32,
}

impl LockTableHandle {
    pub fn new(region: RemoteRegion, item_count: u32) -> Result<LockTableHandle, LockTableError> {
        if item_count == 0 {
            return Err(LockTableError::Empty);
        }
        if region.len < WORD_BYTES * item_count as u64 {
            return Err(LockTableError::RegionTooSmall {
                region_len: region.len,
                item_count,
            });
        }
        Ok(LockTableHandle { region, item_count })
    }

    pub fn region(&self) -> &RemoteRegion {
        &self.region
    }

    pub fn item_count(&self) -> u32 {
        self.item_count
    }

    pub fn word_offset(&self, item: u32) -> Result<u64, LockTableError> {
        word_offset(item, self.item_count)
    }

    pub fn exclusive_half_offset(&self, item: u32) -> Result<u64, LockTableError> {
        Ok(self.word_offset(item)? + EXCLUSIVE_HALF_OFFSET)
    }
}
