use std::path::PathBuf;

use rdlm::bench::{
    request_stream, run_workload, sweep_clients, sweep_contention, write_csv, WorkloadSpec, CSV_HEADER,
};
use rdlm::checker::{check_all, Outcome, TraceOp};
use rdlm::Design;

fn spec(design: Design, n_clients: u32, n_items: u32, ops: u64, shared: f64) -> WorkloadSpec {
    WorkloadSpec {
        design,
        n_clients,
        n_items,
        ops_per_client: ops,
        shared_fraction: shared,
        ..WorkloadSpec::default()
    }
}

#[test]
fn single_client_trace_alternates() {
    for design in Design::ALL {
        let out = run_workload(&spec(design, 1, 1, 10, 0.0)).unwrap();
        assert_eq!(out.result.total_locks_granted, 10, "{design}");
        let pattern = [
            (TraceOp::Acquire, Outcome::Req),
            (TraceOp::Acquire, Outcome::Grant),
            (TraceOp::Release, Outcome::Req),
            (TraceOp::Release, Outcome::Ack),
        ];
        assert_eq!(out.trace.len(), 40);
        for (k, ev) in out.trace.iter().enumerate() {
            let (op, outcome) = pattern[k % 4];
            assert!(ev.is(op, outcome), "{design} event {k}: {ev}");
        }
    }
}

#[test]
fn two_exclusive_clients_on_one_item_are_safe() {
    for design in Design::ALL {
        let out = run_workload(&spec(design, 2, 1, 200, 0.0)).unwrap();
        assert_eq!(out.result.total_locks_granted, 400);
        assert!(check_all(&out.trace, Some(design)).is_empty());
    }
}

#[test]
fn throughput_is_grants_over_elapsed() {
    let out = run_workload(&spec(Design::ServerTcp, 3, 5, 50, 0.5)).unwrap();
    let r = &out.result;
    assert!((r.throughput - r.total_locks_granted as f64 / r.elapsed.as_secs_f64()).abs() < 1e-6);
    assert_eq!(r.per_client.len(), 3);
    assert!(r.per_client.iter().all(|c| c.latency.count == 50));
    assert_eq!(r.contention_rate, 1.0 - 5.0 / 3.0);
}

#[test]
fn same_seed_same_streams() {
    let a: Vec<_> = (0..4).map(|k| request_stream(9, k, 7, 0.3, 100)).collect();
    let b: Vec<_> = (0..4).map(|k| request_stream(9, k, 7, 0.3, 100)).collect();
    assert_eq!(a, b);
}

#[test]
fn sweep_clients_rows_in_order() {
    let rows = sweep_clients(&spec(Design::ClientCentric, 1, 8, 20, 0.5), &[1, 2, 4]).unwrap();
    let n: Vec<u32> = rows.iter().map(|r| r.spec.n_clients).collect();
    assert_eq!(n, [1, 2, 4]);
    assert!(rows.iter().all(|r| r.outcome.is_ok()));
    assert!(sweep_clients(&spec(Design::ClientCentric, 1, 8, 20, 0.5), &[]).is_err());
}

#[test]
fn sweep_contention_reports_cr_column() {
    let base = spec(Design::ClientCentric, 40, 1, 5, 0.5);
    let rows = sweep_contention(&base, &[40, 20, 8, 4]).unwrap();
    let cr: Vec<f64> = rows.iter().map(|r| r.spec.contention_rate()).collect();
    assert_eq!(cr, [0.0, 0.5, 0.8, 0.9]);
    let csv_cr: Vec<String> = rows.iter().map(|r| r.to_csv().split(',').nth(4).unwrap().to_string()).collect();
    assert_eq!(csv_cr, ["0", "0.5", "0.8", "0.9"]);
    let rows = sweep_contention(&spec(Design::ServerSr, 6, 1, 5, 0.5), &[6]).unwrap();
    assert_eq!(rows[0].spec.contention_rate(), 0.0);
}

#[test]
fn failed_points_are_marked_and_the_sweep_continues() {
    let rows = sweep_clients(&spec(Design::ServerTcp, 1, 4, 10, 0.5), &[1, 0, 2]).unwrap();
    assert!(rows[0].outcome.is_ok());
    assert!(rows[1].outcome.is_err());
    assert!(rows[2].outcome.is_ok());
    let mut buf = Vec::new();
    write_csv(&mut buf, &rows, true).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    assert_eq!(lines.len(), 4);
    assert!(lines[2].ends_with(",failed,failed,1"));
    assert!(lines[3].starts_with("server-tcp,inproc,2,4,-1,0.5,20,"));
}

#[test]
fn multiprocess_run_merges_traces() {
    for design in Design::ALL {
        let s = WorkloadSpec {
            transport: rdlm::bench::TransportKind::Tcp,
            worker_exe: Some(PathBuf::from(env!("CARGO_BIN_EXE_rdlm"))),
            ..spec(design, 3, 2, 40, 0.5)
        };
        let out = run_workload(&s).unwrap();
        assert_eq!(out.result.total_locks_granted, 120, "{design}");
        assert_eq!(out.trace.len(), 480, "{design}");
        assert_eq!(out.result.dirty_words, 0);
    }
}

#[test]
fn missing_worker_executable_is_an_error() {
    let s = WorkloadSpec {
        transport: rdlm::bench::TransportKind::Tcp,
        worker_exe: Some("/nonexistent/rdlm".into()),
        ..spec(Design::ServerTcp, 1, 1, 1, 0.5)
    };
    assert!(run_workload(&s).is_err());
}
