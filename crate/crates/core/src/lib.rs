//! Distributed lock managers over an emulated RDMA verb layer.
//!
//! Two designs are provided side by side:
//!
//! * [`server_lm`]: a centralized manager with per-item FIFO queues, reachable
//!   either over plain TCP or over two-sided SEND/RECV verbs.
//! * [`client_lm`]: clients acquire and release locks by issuing one-sided
//!   CAS / FA / READ / WRITE verbs against a lock table registered on a passive
//!   host.
//!
//! [`bench`] drives closed-loop workloads against either design and
//! [`checker`] validates the resulting traces.

use std::fmt;
use std::str::FromStr;

pub mod bench;
pub mod checker;
pub mod client_lm;
pub mod locktable;
pub mod server_lm;
pub mod verbs;

/// Lock mode requested or held by a client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LockMode {
    Shared,
    Exclusive,
}

impl LockMode {
    pub fn is_compatible(self, other: LockMode) -> bool {
        self == LockMode::Shared && other == LockMode::Shared
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LockMode::Shared => "SHARED",
            LockMode::Exclusive => "EXCLUSIVE",
        }
    }
}

impl fmt::Display for LockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "SHARED" | "S" => Ok(LockMode::Shared),
            "EXCLUSIVE" | "E" => Ok(LockMode::Exclusive),
            other => Err(format!("unknown lock mode `{other}`")),
        }
    }
}

/// Which lock manager design a run or trace belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Design {
    /// Centralized manager behind a length-prefixed TCP frontend.
    ServerTcp,
    /// Centralized manager behind a SEND/RECV verb frontend.
    ServerSr,
    /// Clients drive lock words directly with one-sided atomics.
    ClientCentric,
}

impl Design {
    pub const ALL: [Design; 3] = [Design::ServerTcp, Design::ServerSr, Design::ClientCentric];

    pub fn as_str(self) -> &'static str {
        match self {
            Design::ServerTcp => "server-tcp",
            Design::ServerSr => "server-sr",
            Design::ClientCentric => "client-centric",
        }
    }

    pub fn is_server(self) -> bool {
        !matches!(self, Design::ClientCentric)
    }
}

impl fmt::Display for Design {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Design {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "server-tcp" => Ok(Design::ServerTcp),
            "server-sr" => Ok(Design::ServerSr),
            "client-centric" => Ok(Design::ClientCentric),
            other => Err(format!("unknown design `{other}`")),
        }
    }
}

/// Blocking lock client interface shared by every design, used by the
/// benchmark harness.
pub trait LockClient: Send {
    /// Error type surfaced by acquire/release.
    type Error: std::error::Error + Send + Sync + 'static;

    fn client_id(&self) -> u32;

    /// Blocks until `item` is held in `mode`.
    fn lock(&mut self, item: u32, mode: LockMode) -> Result<(), Self::Error>;

    /// Releases a lock previously obtained through [`LockClient::lock`].
    fn unlock(&mut self, item: u32, mode: LockMode) -> Result<(), Self::Error>;

    /// Whether `err` means the acquire gave up without taking the lock.
    fn is_timeout(_err: &Self::Error) -> bool {
        false
    }
}
