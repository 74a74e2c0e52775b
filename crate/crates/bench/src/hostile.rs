//! A storm of sandboxed calls whose arguments point outside their scope.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpcool::heap::{ShmAlloc, PAGE};
use rpcool::rpc::RpcError;

use crate::echo::{EchoInfo, Gather, GATHER, NOOP, SENTINEL};
use crate::harness::Harness;
use crate::noop::{connect, Via};

#[derive(Debug, Clone, Default)]
pub struct HostileOutcome {
    pub calls: u64,
    pub violations: u64,
    /// Other outcomes, by debug name.
    pub others: Vec<String>,
    /// Responses in which sentinel bytes showed up.
    pub leaks: u64,
    pub secret_intact: bool,
    pub benign_ok: bool,
    pub elapsed: Duration,
}

impl HostileOutcome {
    pub fn ok(&self) -> bool {
        self.calls > 0 && self.violations == self.calls && self.leaks == 0 && self.secret_intact && self.benign_ok
    }
}

fn leaked(bytes: &[u8], ret: Option<u64>) -> bool {
    let word = u64::from_ne_bytes([SENTINEL; 8]);
    bytes.contains(&SENTINEL) || ret.is_some_and(|r| r.to_ne_bytes().contains(&SENTINEL))
        || ret == Some(word)
}

/// Runs `calls` hostile calls against a fresh echo server, then one benign
/// call.
pub fn run(h: &Harness, via: Via, calls: u64, seed: u64) -> anyhow::Result<HostileOutcome> {
    let t0 = Instant::now();
    let channel = format!("/bench/hostile/{}/{}", std::process::id(), via.name());
    let mut peer = h.spawn("echo", &[&channel])?;
    let info = EchoInfo::parse(&peer.info)?;
    let conn = connect(h, 20, &channel, via)?;
    let scope = conn.create_scope(4 * PAGE)?;
    // Heap data outside the scope, filled like the secret so a read of it
    // would show.
    let outside = conn.heap().alloc(2 * PAGE, PAGE)?;
    // SAFETY: fresh allocation of that size.
    unsafe { std::ptr::write_bytes(outside as *mut u8, SENTINEL, 2 * PAGE as usize) };
    let other_scope = conn.create_scope(PAGE)?;
    // SAFETY: inside the scope just created.
    unsafe { std::ptr::write_bytes((other_scope.start() + 128) as *mut u8, SENTINEL, 256) };

    let g = scope.alloc_value(Gather { src: 0, len: 0, dst: 0 })?;
    let dst_len = 256u64;
    let dst = scope.alloc(dst_len, 64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = HostileOutcome::default();

    for i in 0..calls {
        let src = match i % 4 {
            0 => info.secret + rng.gen_range(0..info.secret_len - 64),
            1 => outside + rng.gen_range(0..PAGE),
            2 => other_scope.start() + 128 + rng.gen_range(0..64),
            // Starts inside the scope and runs off its end.
            _ => scope.end() - rng.gen_range(1..32),
        };
        let len = if i % 4 == 3 { 64 } else { rng.gen_range(8..dst_len) };
        // SAFETY: g and dst are live allocations in the scope.
        unsafe {
            *g.as_mut() = Gather { src, len, dst };
            std::ptr::write_bytes(dst as *mut u8, 0, dst_len as usize);
        }
        let r = conn.call_secure(GATHER, g.addr(), &scope);
        out.calls += 1;
        let resp = unsafe { std::slice::from_raw_parts(dst as *const u8, dst_len as usize) };
        let ret = r.as_ref().ok().copied();
        match r {
            Err(RpcError::SandboxViolation) => out.violations += 1,
            other => out.others.push(format!("{other:?}")),
        }
        if leaked(resp, ret) {
            out.leaks += 1;
        }
    }

    // After the storm: a benign gather and a no-op still work.
    let src = scope.alloc(64, 8)?;
    // SAFETY: fresh allocation in the scope.
    unsafe {
        std::ptr::write_bytes(src as *mut u8, 0x3C, 64);
        *g.as_mut() = Gather { src, len: 64, dst };
    }
    let benign = conn.call_secure(GATHER, g.addr(), &scope);
    let copied = unsafe { std::slice::from_raw_parts(dst as *const u8, 64) }.iter().all(|&b| b == 0x3C);
    out.benign_ok = benign.ok() == Some(u64::from_ne_bytes([0x3C; 8])) && copied && conn.call(NOOP, 0).is_ok();
    out.secret_intact = peer.request("SECRET", "SECRET")? == "true";
    drop(conn);
    peer.finish(Duration::from_secs(10))?;
    out.elapsed = t0.elapsed();
    Ok(out)
}
