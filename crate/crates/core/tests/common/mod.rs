//! Multi-process test support: an orchestrator in the test process and peers
//! that re-run the test binary in a role chosen by environment variable.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rpcool::orchestrator::OrchestratorServer;
use rpcool::runtime::NodeRuntime;
use rpcool::{OrchestratorConfig, RuntimeConfig};

pub const ROLE: &str = "RPCOOL_TEST_ROLE";
pub const ARG: &str = "RPCOOL_TEST_ARG";

pub struct Cluster {
    pub orch: OrchestratorServer,
    pub dir: tempfile::TempDir,
}

impl Cluster {
    /// Orchestrator with its own address range, so tests in one binary do
    /// not collide.
    pub fn new() -> Self {
        Self::with(|_| {})
    }

    pub fn with(tweak: impl FnOnce(&mut OrchestratorConfig)) -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(0);
        let n = NEXT.fetch_add(1, Ordering::Relaxed) % 16 + (std::process::id() as u64 % 256) * 16;
        let mut cfg = OrchestratorConfig {
            pool_base: 0x5000_0000_0000 + n * (1 << 33),
            pool_span: 1 << 33,
            ..Default::default()
        };
        tweak(&mut cfg);
        Self {
            orch: OrchestratorServer::bind("127.0.0.1:0", cfg).unwrap(),
            dir: tempfile::tempdir().unwrap(),
        }
    }

    pub fn endpoint(&self) -> String {
        self.orch.local_addr().to_string()
    }

    pub fn config(&self, node: u32) -> RuntimeConfig {
        let mut c = RuntimeConfig::default().with_pool_dir(self.dir.path());
        c.node_id = node;
        c
    }

    pub fn runtime(&self, node: u32) -> NodeRuntime {
        NodeRuntime::connect(self.config(node), &self.endpoint()).unwrap()
    }

    /// A runtime outside the pool.
    pub fn remote_runtime(&self, node: u32) -> NodeRuntime {
        NodeRuntime::connect(self.config(node).without_pool(), &self.endpoint()).unwrap()
    }

    /// Starts `test` of this binary in `role` and waits for it to print
    /// `READY`. The peer exits when its stdin closes.
    pub fn spawn(&self, test: &str, role: &str, arg: &str) -> Peer {
        let exe = std::env::current_exe().unwrap();
        let mut child = Command::new(exe)
            .args([test, "--exact", "--nocapture", "--test-threads=1"])
            .env(ROLE, role)
            .env(ARG, arg)
            .env("RPCOOL_ORCH", self.endpoint())
            .env("RPCOOL_POOL_DIR", self.dir.path())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let stdin = child.stdin.take();
        let mut out = BufReader::new(child.stdout.take().unwrap());
        let mut ready = None;
        let mut line = String::new();
        while out.read_line(&mut line).unwrap() > 0 {
            // libtest may have printed "test name ... " on the same line.
            if let Some(i) = line.find("READY") {
                ready = Some(line[i + 5..].trim().to_string());
                break;
            }
            line.clear();
        }
        let info = ready.unwrap_or_else(|| panic!("peer {role} exited before it was ready"));
        Peer {
            child,
            stdin,
            out,
            info,
        }
    }
}

pub struct Peer {
    pub child: Child,
    stdin: Option<ChildStdin>,
    out: BufReader<ChildStdout>,
    /// Whatever the peer printed after `READY`.
    pub info: String,
}

impl Peer {
    pub fn send(&mut self, line: &str) {
        let s = self.stdin.as_mut().unwrap();
        writeln!(s, "{line}").unwrap();
        s.flush().unwrap();
    }

    /// Next line the peer prints that starts with `prefix`.
    pub fn expect(&mut self, prefix: &str) -> String {
        let mut line = String::new();
        loop {
            line.clear();
            assert!(self.out.read_line(&mut line).unwrap() > 0, "peer exited");
            if let Some(i) = line.find(prefix) {
                return line[i + prefix.len()..].trim().to_string();
            }
        }
    }

    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    /// Closes stdin and waits for a clean exit.
    pub fn finish(mut self) {
        self.stdin = None;
        for _ in 0..500 {
            if let Ok(Some(st)) = self.child.try_wait() {
                assert!(st.success(), "peer failed: {st}");
                return;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        self.kill();
        panic!("peer did not exit");
    }
}

impl Drop for Peer {
    fn drop(&mut self) {
        if matches!(self.child.try_wait(), Ok(None)) {
            self.stdin = None;
            std::thread::sleep(Duration::from_millis(50));
            self.kill();
        }
    }
}

/// In a peer: the role to play, if any.
pub fn role() -> Option<(String, String)> {
    let r = std::env::var(ROLE).ok()?;
    Some((r, std::env::var(ARG).unwrap_or_default()))
}

/// In a peer: runtime from the environment.
pub fn peer_runtime(node: u32, pool: bool) -> NodeRuntime {
    let mut cfg = RuntimeConfig::from_env().unwrap();
    cfg.node_id = node;
    if !pool {
        cfg = cfg.without_pool();
    }
    NodeRuntime::connect(cfg, &std::env::var("RPCOOL_ORCH").unwrap()).unwrap()
}

/// In a peer: announce readiness, then serve until stdin closes, passing
/// each line to `on_line`.
pub fn ready_and_wait(info: &str, mut on_line: impl FnMut(&str)) {
    println!("READY {info}");
    std::io::stdout().flush().unwrap();
    let stdin = std::io::stdin();
    for line in stdin.lock().lines() {
        match line {
            Ok(l) => on_line(&l),
            Err(_) => break,
        }
    }
}
