//! C ABI for the rdlm lock managers.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free` function. Fallible calls return an [`RdlmStatus`]; the
//! message for the most recent failure on the calling thread is available
//! from [`rdlm_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::ptr;
use std::sync::Arc;
use std::time::Duration;

use rdlm::bench::contention_rate;
use rdlm::checker::{check_all, read_trace, sort_events};
use rdlm::client_lm::{ClientError, ClientSession, SessionConfig};
use rdlm::locktable::{LockTable, LockWord};
use rdlm::server_lm::upper_bound_throughput;
use rdlm::verbs::{Node, QueuePair, TcpAgent};
use rdlm::{Design, LockClient, LockMode};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RdlmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Timeout = 3,
    AlreadyHeld = 4,
    NotHeld = 5,
    Io = 6,
    Transport = 7,
    Violations = 8,
}

/// Lock modes as passed across the ABI.
pub const RDLM_MODE_SHARED: u32 = 0;
pub const RDLM_MODE_EXCLUSIVE: u32 = 1;

/// Design selectors for [`rdlm_check_trace_file`]; `RDLM_DESIGN_NONE` skips
/// the FIFO check.
pub const RDLM_DESIGN_NONE: i32 = -1;
pub const RDLM_DESIGN_SERVER_TCP: i32 = 0;
pub const RDLM_DESIGN_SERVER_SR: i32 = 1;
pub const RDLM_DESIGN_CLIENT_CENTRIC: i32 = 2;

/// A node hosting one lock table.
pub struct RdlmHost {
    node: Arc<Node>,
    table: LockTable,
    agent: Option<TcpAgent>,
}

/// A client-centric lock session.
pub struct RdlmSession {
    inner: ClientSession,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: RdlmStatus, msg: impl ToString) -> RdlmStatus {
    let msg = CString::new(msg.to_string().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
    status
}

fn client_status(e: &ClientError) -> RdlmStatus {
    match e {
        ClientError::AcquisitionTimeout { .. } => RdlmStatus::Timeout,
        ClientError::AlreadyHeld(_) => RdlmStatus::AlreadyHeld,
        ClientError::NotHeld { .. } => RdlmStatus::NotHeld,
        ClientError::Verb(_) | ClientError::ReleaseFailed { .. } => RdlmStatus::Transport,
        ClientError::InvalidClientId(_) | ClientError::Table(_) => RdlmStatus::InvalidArgument,
    }
}

fn mode_from(mode: u32) -> Option<LockMode> {
    match mode {
        RDLM_MODE_SHARED => Some(LockMode::Shared),
        RDLM_MODE_EXCLUSIVE => Some(LockMode::Exclusive),
        _ => None,
    }
}

fn session_config(backoff_ns: u64, max_retries: i64) -> SessionConfig {
    SessionConfig {
        backoff: Duration::from_nanos(backoff_ns),
        max_retries: u64::try_from(max_retries).ok(),
    }
}

/// Message describing the last failure on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rdlm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn rdlm_lock_word_encode(owner: u32, shared_count: u32) -> u64 {
    LockWord::encode(owner, shared_count).raw()
}

/// # Safety
/// `owner` and `shared_count` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rdlm_lock_word_decode(word: u64, owner: *mut u32, shared_count: *mut u32) -> RdlmStatus {
    if owner.is_null() || shared_count.is_null() {
        return fail(RdlmStatus::NullPointer, "null output pointer");
    }
    let (o, c) = LockWord::from_raw(word).decode();
    *owner = o;
    *shared_count = c;
    RdlmStatus::Ok
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rdlm_contention_rate(n_items: u32, n_clients: u32, out: *mut f64) -> RdlmStatus {
    if out.is_null() {
        return fail(RdlmStatus::NullPointer, "null output pointer");
    }
    match contention_rate(n_items, n_clients) {
        Ok(v) => {
            *out = v;
            RdlmStatus::Ok
        }
        Err(e) => fail(RdlmStatus::InvalidArgument, e),
    }
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rdlm_upper_bound_throughput(
    cores: f64,
    frequency_hz: f64,
    cycles_per_message: f64,
    messages_per_lock: f64,
    out: *mut f64,
) -> RdlmStatus {
    if out.is_null() {
        return fail(RdlmStatus::NullPointer, "null output pointer");
    }
    match upper_bound_throughput(cores, frequency_hz, cycles_per_message, messages_per_lock) {
        Ok(v) => {
            *out = v;
            RdlmStatus::Ok
        }
        Err(e) => fail(RdlmStatus::InvalidArgument, e),
    }
}

/// Creates a node hosting a lock table of `n_items` words.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rdlm_host_new(n_items: u32, out: *mut *mut RdlmHost) -> RdlmStatus {
    if out.is_null() {
        return fail(RdlmStatus::NullPointer, "null output pointer");
    }
    let node = Node::new();
    match LockTable::create(&node, n_items) {
        Ok(table) => {
            *out = Box::into_raw(Box::new(RdlmHost { node, table, agent: None }));
            RdlmStatus::Ok
        }
        Err(e) => fail(RdlmStatus::InvalidArgument, e),
    }
}

/// # Safety
/// `host` must come from [`rdlm_host_new`] and not be used afterwards.
/// Sessions connected to it must be freed first.
#[no_mangle]
pub unsafe extern "C" fn rdlm_host_free(host: *mut RdlmHost) {
    if !host.is_null() {
        drop(Box::from_raw(host));
    }
}

/// Starts accepting TCP-emulated connections on `addr` (e.g.
/// `"127.0.0.1:0"`) and writes the bound port to `port`.
///
/// # Safety
/// `host` must be a live host, `addr` a NUL-terminated string and `port`
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rdlm_host_listen(host: *mut RdlmHost, addr: *const c_char, port: *mut u16) -> RdlmStatus {
    if host.is_null() || addr.is_null() || port.is_null() {
        return fail(RdlmStatus::NullPointer, "null argument");
    }
    let host = &mut *host;
    if host.agent.is_some() {
        return fail(RdlmStatus::InvalidArgument, "host is already listening");
    }
    let Ok(addr) = CStr::from_ptr(addr).to_str() else {
        return fail(RdlmStatus::InvalidArgument, "address is not UTF-8");
    };
    match TcpAgent::start(Arc::clone(&host.node), addr) {
        Ok(agent) => {
            *port = agent.local_addr().port();
            host.agent = Some(agent);
            RdlmStatus::Ok
        }
        Err(e) => fail(RdlmStatus::Io, e),
    }
}

/// Reads one lock word from the host's table.
///
/// # Safety
/// `host` must be a live host; `owner` and `shared_count` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rdlm_host_lock_word(
    host: *const RdlmHost,
    item: u32,
    owner: *mut u32,
    shared_count: *mut u32,
) -> RdlmStatus {
    if host.is_null() || owner.is_null() || shared_count.is_null() {
        return fail(RdlmStatus::NullPointer, "null argument");
    }
    match (*host).table.word(item) {
        Ok(w) => {
            *owner = w.owner();
            *shared_count = w.shared_count();
            RdlmStatus::Ok
        }
        Err(e) => fail(RdlmStatus::InvalidArgument, e),
    }
}

unsafe fn finish_session(
    qp: Result<QueuePair, rdlm::verbs::VerbError>,
    n_items: u32,
    cfg: SessionConfig,
    out: *mut *mut RdlmSession,
) -> RdlmStatus {
    let qp = match qp {
        Ok(qp) => qp,
        Err(e) => return fail(RdlmStatus::Transport, e),
    };
    match ClientSession::from_connection(qp, n_items, cfg) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(RdlmSession { inner }));
            RdlmStatus::Ok
        }
        Err(e) => fail(client_status(&e), e),
    }
}

/// Opens an in-process session on `host`. A negative `max_retries` retries
/// forever.
///
/// # Safety
/// `host` must be a live host and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rdlm_session_connect_local(
    host: *const RdlmHost,
    backoff_ns: u64,
    max_retries: i64,
    out: *mut *mut RdlmSession,
) -> RdlmStatus {
    if host.is_null() || out.is_null() {
        return fail(RdlmStatus::NullPointer, "null argument");
    }
    let host = &*host;
    let qp = host.node.connect_local(Duration::ZERO);
    finish_session(qp, host.table.item_count(), session_config(backoff_ns, max_retries), out)
}

/// Opens a session to a listening host at `addr` whose table has `n_items`
/// words.
///
/// # Safety
/// `addr` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rdlm_session_connect_tcp(
    addr: *const c_char,
    n_items: u32,
    backoff_ns: u64,
    max_retries: i64,
    out: *mut *mut RdlmSession,
) -> RdlmStatus {
    if addr.is_null() || out.is_null() {
        return fail(RdlmStatus::NullPointer, "null argument");
    }
    let Ok(addr) = CStr::from_ptr(addr).to_str() else {
        return fail(RdlmStatus::InvalidArgument, "address is not UTF-8");
    };
    let qp = QueuePair::connect_tcp(addr, Duration::ZERO);
    finish_session(qp, n_items, session_config(backoff_ns, max_retries), out)
}

/// # Safety
/// `session` must come from one of the connect functions and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn rdlm_session_free(session: *mut RdlmSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Client id of the session, or 0 for NULL.
///
/// # Safety
/// `session` must be NULL or a live session.
#[no_mangle]
pub unsafe extern "C" fn rdlm_session_client_id(session: *const RdlmSession) -> u32 {
    if session.is_null() {
        return 0;
    }
    (*session).inner.client_id()
}

unsafe fn with_session(
    session: *mut RdlmSession,
    mode: u32,
    f: impl FnOnce(&mut ClientSession, LockMode) -> Result<(), ClientError>,
) -> RdlmStatus {
    if session.is_null() {
        return fail(RdlmStatus::NullPointer, "null session");
    }
    let Some(mode) = mode_from(mode) else {
        return fail(RdlmStatus::InvalidArgument, format!("unknown lock mode {mode}"));
    };
    match f(&mut (*session).inner, mode) {
        Ok(()) => RdlmStatus::Ok,
        Err(e) => fail(client_status(&e), e),
    }
}

/// Blocks until `item` is held in `mode` or the retry budget runs out.
///
/// # Safety
/// `session` must be a live session not used concurrently from another
/// thread.
#[no_mangle]
pub unsafe extern "C" fn rdlm_session_lock(session: *mut RdlmSession, item: u32, mode: u32) -> RdlmStatus {
    with_session(session, mode, |s, m| s.lock(item, m))
}

/// # Safety
/// As for [`rdlm_session_lock`].
#[no_mangle]
pub unsafe extern "C" fn rdlm_session_unlock(session: *mut RdlmSession, item: u32, mode: u32) -> RdlmStatus {
    with_session(session, mode, |s, m| s.unlock(item, m))
}

/// Checks a trace file and writes the number of violations to
/// `violations`. Returns `RDLM_STATUS_VIOLATIONS` when that number is
/// non-zero.
///
/// # Safety
/// `path` must be a NUL-terminated string and `violations` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn rdlm_check_trace_file(path: *const c_char, design: i32, violations: *mut u64) -> RdlmStatus {
    if path.is_null() || violations.is_null() {
        return fail(RdlmStatus::NullPointer, "null argument");
    }
    let design = match design {
        RDLM_DESIGN_NONE => None,
        RDLM_DESIGN_SERVER_TCP => Some(Design::ServerTcp),
        RDLM_DESIGN_SERVER_SR => Some(Design::ServerSr),
        RDLM_DESIGN_CLIENT_CENTRIC => Some(Design::ClientCentric),
        other => return fail(RdlmStatus::InvalidArgument, format!("unknown design {other}")),
    };
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        return fail(RdlmStatus::InvalidArgument, "path is not UTF-8");
    };
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) => return fail(RdlmStatus::Io, format!("{path}: {e}")),
    };
    let mut events = match read_trace(BufReader::new(file)) {
        Ok(ev) => ev,
        Err(e) => return fail(RdlmStatus::InvalidArgument, e),
    };
    sort_events(&mut events);
    let found = check_all(&events, design);
    *violations = found.len() as u64;
    match found.first() {
        None => RdlmStatus::Ok,
        Some(v) => fail(RdlmStatus::Violations, v),
    }
}
