//! The `rpcool-bench` and `rpcool-orchd` command lines.

use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};

use rpcool_bench::report::{BenchReport, Row, CSV_HEADER};
use rpcool_bench::stats::Summary;

const BENCH: &str = env!("CARGO_BIN_EXE_rpcool-bench");
const ORCHD: &str = env!("CARGO_BIN_EXE_rpcool-orchd");

fn bench() -> Command {
    let mut c = Command::new(BENCH);
    c.env_remove("RPCOOL_ORCH").env_remove("RPCOOL_POOL_DIR");
    c
}

fn saved(dir: &std::path::Path, rows: usize) -> std::path::PathBuf {
    let mut r = BenchReport::new();
    let s = Summary::of(&[1000, 2000, 3000]).unwrap();
    for i in 0..rows {
        r.push(Row::new(format!("op{i}"), "shm", "plain", &s));
    }
    let p = dir.join(format!("r{rows}.json"));
    std::fs::write(&p, serde_json::to_string(&r).unwrap()).unwrap();
    p
}

#[test]
fn report_csv_and_markdown() {
    let dir = tempfile::tempdir().unwrap();
    let src = saved(dir.path(), 3);
    let csv = dir.path().join("out.csv");
    let st = bench()
        .args(["report", "--format", "csv", "--min-samples", "3", "--out"])
        .arg(&csv)
        .arg("--from")
        .arg(&src)
        .status()
        .unwrap();
    assert!(st.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0], CSV_HEADER.join(","));
    assert!(lines[1].starts_with("op0,shm,plain,3,"));

    let md = dir.path().join("out.md");
    let st = bench()
        .args(["report", "--format", "md", "--min-samples", "3", "--out"])
        .arg(&md)
        .arg("--from")
        .arg(&src)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(std::fs::read_to_string(&md).unwrap().contains("| op2 | shm | plain | 3 |"));
}

#[test]
fn report_sample_minimum() {
    let dir = tempfile::tempdir().unwrap();
    let src = saved(dir.path(), 1);
    let out = bench()
        .args(["report", "--format", "csv", "--out"])
        .arg(dir.path().join("o.csv"))
        .arg("--from")
        .arg(&src)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("fewer than the minimum 100000"));
}

#[test]
fn empty_report_needs_flag() {
    let dir = tempfile::tempdir().unwrap();
    let src = saved(dir.path(), 0);
    let out_path = dir.path().join("e.csv");
    let run = |extra: &[&str]| {
        bench()
            .args(["report", "--format", "csv", "--out"])
            .arg(&out_path)
            .arg("--from")
            .arg(&src)
            .args(extra)
            .output()
            .unwrap()
    };
    let out = run(&[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no rows"));
    assert!(!out_path.exists());
    assert!(run(&["--allow-empty"]).status.success());
    assert_eq!(std::fs::read_to_string(&out_path).unwrap().trim(), CSV_HEADER.join(","));
}

#[test]
fn unwritable_output() {
    let dir = tempfile::tempdir().unwrap();
    let src = saved(dir.path(), 2);
    let out = bench()
        .args(["report", "--min-samples", "1", "--out", "/nonexistent/dir/r.md", "--from"])
        .arg(&src)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot write /nonexistent/dir/r.md"));
}

#[test]
fn bad_format_is_rejected() {
    let out = bench().args(["report", "--format", "xml", "--out", "/tmp/x"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn noop_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("noop.csv");
    let st = bench()
        .args(["noop", "--transport", "fallback", "--secure", "--n", "500", "--clients", "2", "--depth", "2"])
        .args(["--format", "csv", "--out"])
        .arg(&csv)
        .status()
        .unwrap();
    assert!(st.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "No-op RPC (sealed + sandboxed)");
    assert_eq!(&rows[0][1], "fallback");
    assert_eq!(&rows[0][3], "500");
    assert!(rows[0][7].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn cooldb_small() {
    let out = bench().args(["cooldb", "--docs", "500", "--queries", "50"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("0 mismatches"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("| CoolDB search | shm |"));
}

#[test]
fn orchd_serves_bench_clients() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("admin.toml");
    std::fs::write(&cfg, "pool_base = 0x610000000000\npool_span = 0x1000000000\nlease_renew_ms = 100\n").unwrap();
    let mut d = Command::new(ORCHD)
        .arg("--config")
        .arg(&cfg)
        .args(["--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut addr = String::new();
    BufReader::new(d.stdout.take().unwrap()).read_line(&mut addr).unwrap();
    let pool = dir.path().join("pool");
    let out = Command::new(BENCH)
        .args(["noop", "--n", "300"])
        .env("RPCOOL_ORCH", addr.trim())
        .env("RPCOOL_POOL_DIR", &pool)
        .output()
        .unwrap();
    let _ = d.kill();
    let _ = d.wait();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("| No-op RPC | shm | plain | 300 |"));
}

#[test]
fn orchd_rejects_bad_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "pool_span = 0\n").unwrap();
    let out = Command::new(ORCHD).arg("--config").arg(&cfg).args(["--listen", "127.0.0.1:0"]).output().unwrap();
    assert!(!out.status.success());
}
