use std::path::Path;

use deferlsm::crash::CrashPoint;
use deferlsm_cli::crashtest::{ops, parse_points, run_case, run_matrix, CrashCase, MatrixOptions, Op};

fn exe() -> &'static Path {
    Path::new(env!("CARGO_BIN_EXE_bench"))
}

#[test]
fn op_sequences_are_seeded() {
    assert_eq!(ops(5, 500, 50), ops(5, 500, 50));
    assert_ne!(ops(5, 500, 50), ops(6, 500, 50));
    let deletes = ops(5, 10_000, 50)
        .iter()
        .filter(|o| matches!(o, Op::Delete(_)))
        .count();
    assert!((800..1200).contains(&deletes));
}

#[test]
fn points_parse() {
    assert_eq!(parse_points("all").unwrap().len(), CrashPoint::ALL.len());
    assert_eq!(
        parse_points("wal-appended, flush-synced").unwrap(),
        vec![CrashPoint::WalAppended, CrashPoint::FlushSynced]
    );
    assert!(parse_points("nowhere").is_err());
}

#[test]
fn crash_after_flush_commit_keeps_flushed_data() {
    let work = tempfile::tempdir().unwrap();
    for wal_fsync in [true, false] {
        let case = CrashCase {
            point: "flush-committed".into(),
            nth: 3,
            seed: 11,
            ops: 5_000,
            key_space: 1_000,
            asynchronous: true,
            wal_fsync,
        };
        let r = run_case(exe(), work.path(), &case).unwrap();
        assert!(r.crashed);
        assert!(r.flushed > 0);
        assert!(r.passed, "{}", r.detail);
    }
}

#[test]
fn unreached_point_still_verifies_a_clean_run() {
    let work = tempfile::tempdir().unwrap();
    let case = CrashCase {
        point: "ledger-closed".into(),
        nth: 1_000_000,
        seed: 3,
        ops: 500,
        key_space: 100,
        asynchronous: true,
        wal_fsync: false,
    };
    let r = run_case(exe(), work.path(), &case).unwrap();
    assert!(!r.crashed);
    assert_eq!(r.recovered, 500);
    assert!(r.passed, "{}", r.detail);
}

#[test]
fn small_matrix_passes() {
    let work = tempfile::tempdir().unwrap();
    let opts = MatrixOptions {
        points: parse_points("wal-torn-append,compaction-output-rolled,ledger-parents-deleted,sync-output-synced").unwrap(),
        reps: 2,
        ops: 6_000,
        ..MatrixOptions::default()
    };
    let r = run_matrix(exe(), work.path(), &opts, false).unwrap();
    assert_eq!(r.failed, 0, "{:#?}", r.cases.iter().filter(|c| !c.passed).collect::<Vec<_>>());
    assert!(r.points_crashed >= 3);
}
