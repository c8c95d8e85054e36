//! Client-driven locking with one-sided verbs.
//!
//! * Exclusive acquire: CAS the item's word from `(0|0)` to `(id|0)`; retry
//!   with the same operands after `backoff` until the returned old value is
//!   `(0|0)`.
//! * Shared acquire: FA(+1) once. If the old owner half is zero the lock is
//!   granted, otherwise poll the 4-byte owner half with READ until it is zero.
//! * Exclusive release: WRITE four zero bytes over the owner half.
//! * Shared release: FA(2^64 - 1).
//!
//! The lock-table host runs no code for any of this.
//!
//! Writers can starve: shared waiters increment the count while an
//! exclusive owner holds the lock, so a steady stream of readers keeps the
//! word away from `(0|0)` indefinitely.

use std::collections::HashMap;
use std::time::Duration;

use crate::locktable::{LockTableError, LockTableHandle, LockWord, DECREMENT, MAX_CLIENTS};
use crate::verbs::{spin_for, Completion, QueuePair, Status};
use crate::{LockClient, LockMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionConfig {
    /// Wait between failed attempts; also the READ-poll interval.
    pub backoff: Duration,
    /// Retries after the first attempt; `None` retries forever.
    pub max_retries: Option<u64>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            backoff: Duration::ZERO,
            max_retries: None,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("client id must be in 1..={MAX_CLIENTS}, got {0}")]
    InvalidClientId(u32),
    #[error("item {0} is already held by this session")]
    AlreadyHeld(u32),
    #[error("item {item} is not held in {mode} mode by this session")]
    NotHeld { item: u32, mode: LockMode },
    #[error("gave up acquiring item {item} in {mode} mode")]
    AcquisitionTimeout { item: u32, mode: LockMode },
    #[error("verb failed: {0}")]
    Verb(Status),
    #[error("release of item {item} failed: {status}")]
    ReleaseFailed { item: u32, status: Status },
    #[error(transparent)]
    Table(#[from] LockTableError),
}

/// A lock held by a [`ClientSession`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HeldLock {
    item: u32,
    mode: LockMode,
}

impl HeldLock {
    pub fn item(&self) -> u32 {
        self.item
    }

    pub fn mode(&self) -> LockMode {
        self.mode
    }
}

/// Count of verbs a session has issued, by kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VerbCounts {
    pub cas: u64,
    pub fetch_add: u64,
    pub read: u64,
    pub write: u64,
}

/// One client's connection to a remote lock table. Single actor: at most
/// one verb is in flight at a time.
#[derive(Debug)]
pub struct ClientSession {
    client_id: u32,
    qp: QueuePair,
    table: LockTableHandle,
    cfg: SessionConfig,
    held: HashMap<u32, LockMode>,
    counts: VerbCounts,
}

impl ClientSession {
    pub fn new(
        client_id: u32,
        qp: QueuePair,
        table: LockTableHandle,
        cfg: SessionConfig,
    ) -> Result<ClientSession, ClientError> {
        if client_id == 0 || client_id > MAX_CLIENTS {
            return Err(ClientError::InvalidClientId(client_id));
        }
        Ok(ClientSession {
            client_id,
            qp,
            table,
            cfg,
            held: HashMap::new(),
            counts: VerbCounts::default(),
        })
    }

    /// Builds a session from a connected queue pair, using the peer ID the
    /// host assigned and the first region it exported as the table.
    pub fn from_connection(qp: QueuePair, item_count: u32, cfg: SessionConfig) -> Result<ClientSession, ClientError> {
        let region = *qp
            .remote_regions()
            .first()
            .ok_or(ClientError::Verb(Status::InvalidRegion))?;
        let table = LockTableHandle::new(region, item_count)?;
        ClientSession::new(qp.peer_id(), qp, table, cfg)
    }

    pub fn client_id(&self) -> u32 {
        self.client_id
    }

    pub fn config(&self) -> SessionConfig {
        self.cfg
    }

    pub fn verb_counts(&self) -> VerbCounts {
        self.counts
    }

    pub fn held(&self) -> impl Iterator<Item = HeldLock> + '_ {
        self.held.iter().map(|(&item, &mode)| HeldLock { item, mode })
    }

    fn wait(&self) {
        if self.cfg.backoff.is_zero() {
            std::thread::yield_now();
        } else {
            spin_for(self.cfg.backoff);
        }
    }

    fn checked(c: Completion) -> Result<Completion, ClientError> {
        if c.is_success() {
            Ok(c)
        } else {
            Err(ClientError::Verb(c.status))
        }
    }

    fn precheck_acquire(&self, item: u32) -> Result<u64, ClientError> {
        let off = self.table.word_offset(item)?;
        if self.held.contains_key(&item) {
            return Err(ClientError::AlreadyHeld(item));
        }
        Ok(off)
    }

    pub fn acquire_exclusive(&mut self, item: u32) -> Result<HeldLock, ClientError> {
        let off = self.precheck_acquire(item)?;
        let swap = LockWord::encode(self.client_id, 0).raw();
        let region = *self.table.region();
        let mut retries = 0u64;
        loop {
            self.counts.cas += 1;
            let c = Self::checked(self.qp.compare_swap(&region, off, LockWord::UNLOCKED.raw(), swap))?;
            if c.old_value() == Some(LockWord::UNLOCKED.raw()) {
                self.held.insert(item, LockMode::Exclusive);
                return Ok(HeldLock {
                    item,
                    mode: LockMode::Exclusive,
                });
            }
            if self.cfg.max_retries.is_some_and(|m| retries >= m) {
                return Err(ClientError::AcquisitionTimeout {
                    item,
                    mode: LockMode::Exclusive,
                });
            }
            retries += 1;
            self.wait();
        }
    }

    pub fn acquire_shared(&mut self, item: u32) -> Result<HeldLock, ClientError> {
        let off = self.precheck_acquire(item)?;
        let region = *self.table.region();
        self.counts.fetch_add += 1;
        let c = Self::checked(self.qp.fetch_add(&region, off, 1))?;
        let old = LockWord::from_raw(c.old_value().ok_or(ClientError::Verb(Status::InvalidRequest))?);
        let granted = HeldLock {
            item,
            mode: LockMode::Shared,
        };
        if old.owner() == 0 {
            self.held.insert(item, LockMode::Shared);
            return Ok(granted);
        }
        // Already counted: poll the owner half only, never FA again.
        let owner_off = off + crate::locktable::EXCLUSIVE_HALF_OFFSET;
        let mut retries = 0u64;
        loop {
            if self.cfg.max_retries.is_some_and(|m| retries >= m) {
                self.counts.fetch_add += 1;
                let undo = self.qp.fetch_add(&region, off, DECREMENT);
                if !undo.is_success() {
                    return Err(ClientError::Verb(undo.status));
                }
                return Err(ClientError::AcquisitionTimeout {
                    item,
                    mode: LockMode::Shared,
                });
            }
            retries += 1;
            self.wait();
            self.counts.read += 1;
            let c = Self::checked(self.qp.read(&region, owner_off, 4))?;
            if c.as_u32() == Some(0) {
                self.held.insert(item, LockMode::Shared);
                return Ok(granted);
            }
        }
    }

    pub fn acquire(&mut self, item: u32, mode: LockMode) -> Result<HeldLock, ClientError> {
        match mode {
            LockMode::Exclusive => self.acquire_exclusive(item),
            LockMode::Shared => self.acquire_shared(item),
        }
    }

    fn take_held(&mut self, lock: HeldLock) -> Result<u64, ClientError> {
        let off = self.table.word_offset(lock.item)?;
        match self.held.get(&lock.item) {
            Some(&m) if m == lock.mode => Ok(off),
            _ => Err(ClientError::NotHeld {
                item: lock.item,
                mode: lock.mode,
            }),
        }
    }

    pub fn release_exclusive(&mut self, lock: HeldLock) -> Result<(), ClientError> {
        if lock.mode != LockMode::Exclusive {
            return Err(ClientError::NotHeld {
                item: lock.item,
                mode: LockMode::Exclusive,
            });
        }
        let off = self.take_held(lock)?;
        let region = *self.table.region();
        self.counts.write += 1;
        let c = self.qp.write(&region, off + crate::locktable::EXCLUSIVE_HALF_OFFSET, &[0; 4]);
        if !c.is_success() {
            return Err(ClientError::ReleaseFailed {
                item: lock.item,
                status: c.status,
            });
        }
        self.held.remove(&lock.item);
        Ok(())
    }

    pub fn release_shared(&mut self, lock: HeldLock) -> Result<(), ClientError> {
        if lock.mode != LockMode::Shared {
            return Err(ClientError::NotHeld {
                item: lock.item,
                mode: LockMode::Shared,
            });
        }
        let off = self.take_held(lock)?;
        let region = *self.table.region();
        self.counts.fetch_add += 1;
        let c = self.qp.fetch_add(&region, off, DECREMENT);
        if !c.is_success() {
            return Err(ClientError::ReleaseFailed {
                item: lock.item,
                status: c.status,
            });
        }
        self.held.remove(&lock.item);
        Ok(())
    }

    pub fn release(&mut self, lock: HeldLock) -> Result<(), ClientError> {
        match lock.mode {
            LockMode::Exclusive => self.release_exclusive(lock),
            LockMode::Shared => self.release_shared(lock),
        }
    }
}

impl LockClient for ClientSession {
    type Error = ClientError;

    fn client_id(&self) -> u32 {
        self.client_id
    }

    fn lock(&mut self, item: u32, mode: LockMode) -> Result<(), ClientError> {
        self.acquire(item, mode).map(|_| ())
    }

    fn unlock(&mut self, item: u32, mode: LockMode) -> Result<(), ClientError> {
        self.release(HeldLock { item, mode })
    }

    fn is_timeout(err: &ClientError) -> bool {
        matches!(err, ClientError::AcquisitionTimeout { .. })
    }
}
