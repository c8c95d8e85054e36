use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};
use std::time::Duration;

use rdlm::client_lm::{ClientSession, SessionConfig};
use rdlm::verbs::QueuePair;
use rdlm::{LockClient, LockMode};

fn rdlm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rdlm"))
}

#[test]
fn bench_writes_csv_and_a_checkable_trace() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    let trace = dir.path().join("trace.csv");
    let st = rdlm()
        .args(["bench", "--design", "server-sr", "--clients", "3", "--items", "2", "--ops", "30", "--seed", "4"])
        .arg("--csv")
        .arg(&csv)
        .arg("--trace")
        .arg(&trace)
        .status()
        .unwrap();
    assert!(st.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "design,transport,n_clients,n_items,contention_rate,shared_fraction,total_locks,elapsed_s,throughput_lps,seed"
    );
    assert!(lines[1].starts_with("server-sr,inproc,3,2,0.33"));
    assert!(lines[1].ends_with(",4"));

    let out = rdlm().arg("check").arg(&trace).args(["--design", "server-sr"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
}

#[test]
fn bench_sweep_prints_one_row_per_point() {
    let out = rdlm()
        .args(["bench", "--design", "client-centric", "--clients", "8", "--ops", "10", "--sweep-items", "8,4,2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cr: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(4).unwrap()).collect();
    assert_eq!(cr, ["0", "0.5", "0.75"]);
}

#[test]
fn check_reports_violations_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(
        &path,
        "# two writers at once\n\
         1,1,0,ACQ,EXCLUSIVE,REQ\n2,2,0,ACQ,EXCLUSIVE,REQ\n\
         3,1,0,ACQ,EXCLUSIVE,GRANT\n4,2,0,ACQ,EXCLUSIVE,GRANT\n\
         5,1,0,REL,EXCLUSIVE,REQ\n6,1,0,REL,EXCLUSIVE,ACK\n\
         7,2,0,REL,EXCLUSIVE,REQ\n8,2,0,REL,EXCLUSIVE,ACK\n",
    )
    .unwrap();
    let out = rdlm().arg("check").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.contains("DOUBLE_EXCLUSIVE"));
}

#[test]
fn malformed_inputs_exit_with_usage_errors() {
    let out = rdlm().args(["bench", "--clients", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = rdlm().args(["bench", "--design", "nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    std::fs::write(&path, "1,1,0,ACQ,EXCLUSIVE\n").unwrap();
    let out = rdlm().arg("check").arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn server_hosts_a_lock_table_until_stdin_closes() {
    let mut child = rdlm()
        .args(["server", "--design", "client-centric", "--items", "4"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut out = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    out.read_line(&mut line).unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();

    let qp = QueuePair::connect_tcp(addr.as_str(), Duration::ZERO).unwrap();
    let mut s = ClientSession::from_connection(qp, 4, SessionConfig::default()).unwrap();
    s.lock(3, LockMode::Exclusive).unwrap();
    s.unlock(3, LockMode::Exclusive).unwrap();
    s.lock(1, LockMode::Shared).unwrap();

    drop(child.stdin.take());
    let mut rest = String::new();
    std::io::Read::read_to_string(&mut out, &mut rest).unwrap();
    assert!(child.wait().unwrap().success());
    assert_eq!(rest.trim(), "1 lock word(s) still set");
}
