//! No-op round trips over each transport, plain and secure.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rpcool::rpc::{ConnectOptions, Connection, Transport, TransportChoice};

use crate::echo::NOOP;
use crate::harness::Harness;
use crate::report::{BenchReport, Row};
use crate::stats::{sample, warmup_for, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, clap::ValueEnum)]
pub enum Via {
    Shm,
    Fallback,
}

impl Via {
    pub fn name(self) -> &'static str {
        match self {
            Via::Shm => "shm",
            Via::Fallback => "fallback",
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoopConfig {
    pub via: Via,
    pub secure: bool,
    /// Latency samples, after a warmup of a tenth as many.
    pub n: usize,
    /// Connections in the throughput phase.
    pub clients: usize,
    /// Callers sharing each connection in the throughput phase.
    pub depth: usize,
}

impl Default for NoopConfig {
    fn default() -> Self {
        Self {
            via: Via::Shm,
            secure: false,
            n: 100_000,
            clients: 1,
            depth: 1,
        }
    }
}

pub fn row_name(secure: bool) -> &'static str {
    if secure {
        "No-op RPC (sealed + sandboxed)"
    } else {
        "No-op RPC"
    }
}

/// A client connection to the echo channel over `via`.
pub fn connect(h: &Harness, node: u32, channel: &str, via: Via) -> anyhow::Result<Connection> {
    let (rt, transport) = match via {
        Via::Shm => (h.runtime(node)?, TransportChoice::SharedMemory),
        Via::Fallback => (h.remote_runtime(node)?, TransportChoice::Fallback),
    };
    let opts = ConnectOptions {
        transport,
        call_timeout: Some(Duration::from_secs(30)),
        ..Default::default()
    };
    let c = Connection::connect_with(&rt, channel, opts)?;
    let want = match via {
        Via::Shm => Transport::SharedMemory,
        Via::Fallback => Transport::Fallback,
    };
    anyhow::ensure!(c.transport() == want, "connected over {:?}", c.transport());
    Ok(c)
}

fn one_call(c: &Connection, scope: Option<&rpcool::heap::Scope>) {
    let r = match scope {
        Some(s) => c.call_secure(NOOP, 0, s),
        None => c.call(NOOP, 0),
    };
    r.expect("no-op call");
}

/// Latency samples of single-caller no-op round trips.
pub fn latency(c: &Connection, secure: bool, n: usize) -> anyhow::Result<Vec<u64>> {
    let scope = if secure { Some(c.create_scope(4096)?) } else { None };
    Ok(sample(n, || one_call(c, scope.as_ref())))
}

/// Completed calls per second with `clients` connections of `depth`
/// concurrent callers each, `total` calls in all.
pub fn throughput(conns: &[Arc<Connection>], secure: bool, depth: usize, total: usize) -> anyhow::Result<f64> {
    let callers = conns.len() * depth;
    let per = total.div_ceil(callers).max(1);
    let mut scopes = Vec::new();
    for c in conns {
        for _ in 0..depth {
            scopes.push(if secure { Some(c.create_scope(4096)?) } else { None });
        }
    }
    let t0 = Instant::now();
    std::thread::scope(|s| {
        for (i, scope) in scopes.iter().enumerate() {
            let c = &conns[i / depth];
            s.spawn(move || {
                for _ in 0..per {
                    one_call(c, scope.as_ref());
                }
            });
        }
    });
    Ok((per * callers) as f64 / t0.elapsed().as_secs_f64())
}

/// Starts an echo peer and measures one configuration.
pub fn run(h: &Harness, cfg: &NoopConfig) -> anyhow::Result<BenchReport> {
    let channel = format!("/bench/noop/{}", std::process::id());
    let peer = h.spawn("echo", &[&channel])?;
    let mut conns = Vec::new();
    for i in 0..cfg.clients.max(1) {
        conns.push(Arc::new(connect(h, 10 + i as u32, &channel, cfg.via)?));
    }
    let lat = latency(&conns[0], cfg.secure, cfg.n)?;
    let tp_total = (cfg.n / 10).max(1000);
    // The throughput phase gets its own warmup.
    throughput(&conns, cfg.secure, cfg.depth.max(1), warmup_for(tp_total))?;
    let tp = throughput(&conns, cfg.secure, cfg.depth.max(1), tp_total)?;
    drop(conns);
    peer.finish(Duration::from_secs(10))?;

    let mode = if cfg.secure { "seal+sandbox" } else { "plain" };
    let mut r = BenchReport::with_host_metadata();
    r.meta("noop.clients", cfg.clients.max(1));
    r.meta("noop.depth", cfg.depth.max(1));
    r.push(Row::new(row_name(cfg.secure), cfg.via.name(), mode, &Summary::of(&lat).expect("samples")).with_throughput(tp));
    Ok(r)
}
