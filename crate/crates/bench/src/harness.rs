//! Runs benchmark peers as separate processes.
//!
//! A [`Harness`] owns a pool directory and talks to an orchestrator, either
//! one it starts in-process or the one named by `RPCOOL_ORCH`. Peers are the
//! `rpcool-bench` binary started with the hidden `peer` subcommand. A peer
//! prints `READY <info>` once it is set up, then reads commands from stdin
//! and exits when stdin closes.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context};
use rpcool::config::{ENV_ORCH, ENV_POOL_DIR};
use rpcool::orchestrator::OrchestratorServer;
use rpcool::runtime::NodeRuntime;
use rpcool::{OrchestratorConfig, RuntimeConfig};

/// Renewal interval for peers, in milliseconds.
pub const ENV_RENEW_MS: &str = "RPCOOL_BENCH_RENEW_MS";

pub struct Harness {
    exe: PathBuf,
    orch: Option<OrchestratorServer>,
    endpoint: String,
    pool_dir: PathBuf,
    /// Renewal interval of the private orchestrator, copied into runtime
    /// configs so leases are renewed often enough.
    renew: Option<Duration>,
    _dir: Option<tempfile::TempDir>,
}

/// Address range for the next in-process orchestrator, distinct from any
/// other harness in this process.
fn pool_range() -> (u64, u64) {
    static NEXT: AtomicU64 = AtomicU64::new(0);
    let n = NEXT.fetch_add(1, Ordering::Relaxed) % 32;
    (0x5000_0000_0000 + n * (1 << 37), 1 << 37)
}

impl Harness {
    /// Uses `RPCOOL_ORCH` and `RPCOOL_POOL_DIR` when set, and otherwise
    /// starts a private orchestrator over a temporary pool.
    pub fn from_env(exe: impl Into<PathBuf>) -> anyhow::Result<Self> {
        match std::env::var(ENV_ORCH) {
            Ok(endpoint) => {
                let pool_dir = RuntimeConfig::from_env()?.pool_dir;
                std::fs::create_dir_all(&pool_dir)?;
                Ok(Self {
                    exe: exe.into(),
                    orch: None,
                    endpoint,
                    pool_dir,
                    renew: None,
                    _dir: None,
                })
            }
            Err(_) => Self::private(exe, |_| {}),
        }
    }

    /// Starts a private orchestrator; `tweak` adjusts its configuration.
    pub fn private(exe: impl Into<PathBuf>, tweak: impl FnOnce(&mut OrchestratorConfig)) -> anyhow::Result<Self> {
        let (pool_base, pool_span) = pool_range();
        let mut cfg = OrchestratorConfig {
            pool_base,
            pool_span,
            ..Default::default()
        };
        tweak(&mut cfg);
        let renew = cfg.renew_interval;
        let orch = OrchestratorServer::bind("127.0.0.1:0", cfg).context("starting orchestrator")?;
        let dir = tempfile::Builder::new().prefix("rpcool-pool").tempdir()?;
        Ok(Self {
            exe: exe.into(),
            endpoint: orch.local_addr().to_string(),
            orch: Some(orch),
            pool_dir: dir.path().to_path_buf(),
            renew: Some(renew),
            _dir: Some(dir),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn pool_dir(&self) -> &Path {
        &self.pool_dir
    }

    /// The in-process orchestrator, if this harness started one.
    pub fn orchestrator(&self) -> Option<&OrchestratorServer> {
        self.orch.as_ref()
    }

    pub fn config(&self, node: u32) -> RuntimeConfig {
        let mut c = RuntimeConfig::default().with_pool_dir(&self.pool_dir);
        c.node_id = node;
        if let Some(r) = self.renew {
            c.renew_interval = r;
        }
        c
    }

    /// A runtime in this process that maps the pool.
    pub fn runtime(&self, node: u32) -> anyhow::Result<NodeRuntime> {
        Ok(NodeRuntime::connect(self.config(node), &self.endpoint)?)
    }

    /// A runtime in this process without pool access.
    pub fn remote_runtime(&self, node: u32) -> anyhow::Result<NodeRuntime> {
        Ok(NodeRuntime::connect(self.config(node).without_pool(), &self.endpoint)?)
    }

    /// Starts `rpcool-bench peer <role> <args..>` and waits for it to be
    /// ready.
    pub fn spawn(&self, role: &str, args: &[&str]) -> anyhow::Result<Peer> {
        let mut child = Command::new(&self.exe)
            .arg("peer")
            .arg(role)
            .args(args)
            .env(ENV_ORCH, &self.endpoint)
            .env(ENV_POOL_DIR, &self.pool_dir)
            .env(ENV_RENEW_MS, self.renew.map_or(String::new(), |r| r.as_millis().to_string()))
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .with_context(|| format!("starting {}", self.exe.display()))?;
        let stdin = child.stdin.take();
        let out = BufReader::new(child.stdout.take().expect("piped stdout"));
        let mut peer = Peer {
            role: role.to_string(),
            child,
            stdin,
            out,
            info: String::new(),
        };
        peer.info = peer.expect("READY").with_context(|| format!("peer {role} did not start"))?;
        Ok(peer)
    }
}

pub struct Peer {
    role: String,
    child: Child,
    stdin: Option<ChildStdin>,
    out: BufReader<ChildStdout>,
    /// What the peer printed after `READY`.
    pub info: String,
}

impl Peer {
    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    pub fn send(&mut self, line: &str) -> anyhow::Result<()> {
        let s = self.stdin.as_mut().ok_or_else(|| anyhow!("peer stdin closed"))?;
        writeln!(s, "{line}")?;
        s.flush()?;
        Ok(())
    }

    /// Rest of the next output line starting with `prefix`. Lines without
    /// it are skipped; `ERR` lines become errors.
    pub fn expect(&mut self, prefix: &str) -> anyhow::Result<String> {
        let mut line = String::new();
        loop {
            line.clear();
            if self.out.read_line(&mut line)? == 0 {
                bail!("peer {} exited while waiting for {prefix}", self.role);
            }
            let l = line.trim_end();
            if let Some(rest) = l.strip_prefix(prefix) {
                return Ok(rest.trim().to_string());
            }
            if let Some(e) = l.strip_prefix("ERR") {
                bail!("peer {}: {}", self.role, e.trim());
            }
        }
    }

    /// Sends a command and waits for the reply line.
    pub fn request(&mut self, line: &str, reply: &str) -> anyhow::Result<String> {
        self.send(line)?;
        self.expect(reply)
    }

    /// Simulated crash: SIGKILL, no cleanup.
    pub fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }

    /// Closes stdin and waits up to `timeout` for a clean exit.
    pub fn finish(mut self, timeout: Duration) -> anyhow::Result<()> {
        self.stdin = None;
        let t0 = Instant::now();
        while t0.elapsed() < timeout {
            if let Some(st) = self.child.try_wait()? {
                if !st.success() {
                    bail!("peer {} failed: {st}", self.role);
                }
                return Ok(());
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        self.kill();
        bail!("peer {} did not exit", self.role)
    }
}

impl Drop for Peer {
    fn drop(&mut self) {
        if matches!(self.child.try_wait(), Ok(None)) {
            self.stdin = None;
            let t0 = Instant::now();
            while t0.elapsed() < Duration::from_millis(500) {
                if !matches!(self.child.try_wait(), Ok(None)) {
                    return;
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            self.kill();
        }
    }
}

/// Peer side: runtime configuration from the environment the harness set.
pub fn peer_config(node: u32) -> anyhow::Result<RuntimeConfig> {
    let mut c = RuntimeConfig::from_env()?;
    c.node_id = node;
    if let Some(ms) = std::env::var(ENV_RENEW_MS).ok().and_then(|v| v.parse::<u64>().ok()) {
        c.renew_interval = Duration::from_millis(ms);
    }
    Ok(c)
}

/// Peer side: a runtime connected to the harness orchestrator; `pool`
/// false gives a node outside the pool.
pub fn peer_runtime(node: u32, pool: bool) -> anyhow::Result<NodeRuntime> {
    let mut c = peer_config(node)?;
    if !pool {
        c = c.without_pool();
    }
    let endpoint = std::env::var(ENV_ORCH).context("RPCOOL_ORCH not set")?;
    Ok(NodeRuntime::connect(c, &endpoint)?)
}

/// Peer side: announces readiness and hands each stdin line to `on_line`
/// until stdin closes or `on_line` returns false.
pub fn serve_stdin(info: &str, mut on_line: impl FnMut(&str) -> anyhow::Result<bool>) -> anyhow::Result<()> {
    println!("READY {info}");
    std::io::stdout().flush()?;
    for line in std::io::stdin().lock().lines() {
        let line = line?;
        match on_line(line.trim()) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => {
                println!("ERR {e:#}");
                std::io::stdout().flush()?;
            }
        }
    }
    Ok(())
}

/// Peer side: prints one reply line.
pub fn reply(line: impl std::fmt::Display) {
    println!("{line}");
    let _ = std::io::stdout().flush();
}
