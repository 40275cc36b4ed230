use std::process::Command;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bench"))
}

#[test]
fn run_writes_a_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.json");
    let status = bench()
        .args(["run", "--workload", "fillrandom", "--ops", "5000", "--value-size", "256"])
        .args(["--threads", "2", "--backend", "async", "--seed", "42", "--scale", "tiny", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(json["workload"]["num_ops"], 5000);
    assert_eq!(json["compaction_mode"], "Asynchronous");
    assert!(json["throughput_ops_s"].as_f64().unwrap() > 0.0);
    assert!(String::from_utf8_lossy(&status.stdout).contains("throughput"));
}

#[test]
fn config_file_and_overrides_are_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("engine.conf");
    std::fs::write(&conf, "io.backend=sim\nio.sim_fsync_latency_us=100\ncompaction.mode=sync\n").unwrap();
    let out = dir.path().join("r.json");
    let st = bench()
        .args(["run", "--ops", "2000", "--scale", "tiny", "--config"])
        .arg(&conf)
        .args(["--set", "io.sim_write_latency_us_per_mib=10", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(json["io_backend"], "SimulatedLatency");
    assert_eq!(json["compaction_mode"], "Synchronous");

    let st = bench().args(["run", "--ops", "10", "--set", "nonsense=1"]).output().unwrap();
    assert!(!st.status.success());
}

#[test]
fn ledger_commands_report_and_clear_open_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("db");
    let st = bench()
        .args(["run", "--ops", "8000", "--scale", "tiny", "--backend", "sim", "--db"])
        .arg(&db)
        .args(["--set", "io.sim_fsync_latency_us=2000"])
        .output()
        .unwrap();
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    // A clean close retires everything.
    let dump = bench().args(["ledger-dump", "--db"]).arg(&db).output().unwrap();
    let text = String::from_utf8_lossy(&dump.stdout);
    assert!(dump.status.success());
    assert!(text.contains("open epochs: 0"), "{text}");
    assert!(text.contains("volatile files: 0"), "{text}");

    let sweep = bench()
        .args(["ledger-sweep", "--scale", "tiny", "--db"])
        .arg(&db)
        .output()
        .unwrap();
    assert!(sweep.status.success(), "{}", String::from_utf8_lossy(&sweep.stderr));
    assert!(String::from_utf8_lossy(&sweep.stdout).contains("open epochs after sweep: 0"));

    let missing = bench().args(["ledger-dump", "--db"]).arg(dir.path().join("none")).output().unwrap();
    assert!(!missing.status.success());
}
