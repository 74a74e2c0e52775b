//! The echo server peer: no-op calls, linked-list checksums and a gather
//! handler used to probe sandbox confinement.

use std::sync::Arc;

use rpcool::heap::ShmAlloc;
use rpcool::rpc::{CallContext, ChannelConfig, HandlerOptions, Server};
use rpcool::sandbox::PrivateRegion;

use crate::harness::{peer_runtime, reply, serve_stdin};

pub const NOOP: u32 = 1;
pub const SUM: u32 = 2;
pub const GATHER: u32 = 3;

/// Byte the secret page is filled with.
pub const SENTINEL: u8 = 0xA5;
pub const SECRET_LEN: usize = 4096;

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct Node {
    pub value: u64,
    pub next: u64,
}

/// Asks the server to copy `len` bytes from `src` to `dst` and return the
/// first word it read.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct Gather {
    pub src: u64,
    pub len: u64,
    pub dst: u64,
}

/// FNV-style fold over the list values.
///
/// # Safety
/// `head` must be 0 or point to a readable, 0-terminated list of [`Node`]s.
pub unsafe fn checksum(mut head: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    while head != 0 {
        let n = std::ptr::read_volatile(head as *const Node);
        h = (h ^ n.value).wrapping_mul(0x0100_0000_01b3);
        head = n.next;
    }
    h
}

/// Builds an `n`-node list with seeded values in `a` and returns its head.
pub fn build_list(a: &impl ShmAlloc, n: usize, seed: u64) -> anyhow::Result<u64> {
    let mut head = 0u64;
    for i in (0..n as u64).rev() {
        let value = (i ^ seed).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        head = a.alloc_value(Node { value, next: head })?.addr();
    }
    Ok(head)
}

fn gather(ctx: &CallContext) -> Result<u64, u32> {
    let g = unsafe { std::ptr::read_volatile(ctx.arg() as *const Gather) };
    let mut first = 0u64;
    for i in 0..g.len {
        let b = unsafe { std::ptr::read_volatile((g.src + i) as *const u8) };
        if i < 8 {
            first |= (b as u64) << (8 * i);
        }
        unsafe { std::ptr::write_volatile((g.dst + i) as *mut u8, b) };
    }
    Ok(first)
}

/// Creates the channel and registers every handler.
pub fn server(rt: &rpcool::runtime::NodeRuntime, channel: &str) -> anyhow::Result<Server> {
    let srv = Server::create(rt, channel, ChannelConfig::default())?;
    srv.register(NOOP, |_| Ok(0))?;
    srv.register(SUM, |ctx| Ok(unsafe { checksum(ctx.arg()) }))?;
    srv.register_with(
        GATHER,
        HandlerOptions {
            require_seal: true,
            sandbox: true,
        },
        gather,
    )?;
    srv.start()?;
    Ok(srv)
}

/// Peer role `echo <channel>`. Prints the fallback address and the secret
/// page's address; answers `SERVED` with the number of calls handled.
pub fn peer(args: &[String]) -> anyhow::Result<()> {
    let channel = args.first().map_or("/bench/echo", |s| s.as_str());
    let rt = peer_runtime(1, true)?;
    let mut secret = PrivateRegion::new(SECRET_LEN)?;
    secret.as_mut_slice().fill(SENTINEL);
    let secret = Arc::new(secret);
    let srv = server(&rt, channel)?;
    let fb = srv.fallback_addr().map_or("-".to_string(), |a| a.to_string());
    serve_stdin(&format!("{fb} {:#x} {SECRET_LEN}", secret.addr()), |line| {
        match line {
            "SERVED" => reply(format!("SERVED {}", srv.served())),
            "SECRET" => {
                let intact = secret.as_slice().iter().all(|&b| b == SENTINEL);
                reply(format!("SECRET {intact}"));
            }
            _ => anyhow::bail!("unknown command {line:?}"),
        }
        Ok(true)
    })?;
    srv.shutdown();
    Ok(())
}

/// What an echo peer announced.
#[derive(Debug, Clone, Copy)]
pub struct EchoInfo {
    pub secret: u64,
    pub secret_len: u64,
}

impl EchoInfo {
    pub fn parse(info: &str) -> anyhow::Result<Self> {
        let f: Vec<&str> = info.split_whitespace().collect();
        anyhow::ensure!(f.len() == 3, "bad echo info {info:?}");
        Ok(Self {
            secret: u64::from_str_radix(f[1].trim_start_matches("0x"), 16)?,
            secret_len: f[2].parse()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_info() {
        let i = EchoInfo::parse("127.0.0.1:5 0x7f00 4096").unwrap();
        assert_eq!((i.secret, i.secret_len), (0x7f00, 4096));
        assert!(EchoInfo::parse("x").is_err());
    }

    #[test]
    fn checksum_of_private_list() {
        let nodes = [Node { value: 1, next: 0 }, Node { value: 2, next: 0 }];
        let mut n = nodes;
        n[0].next = &n[1] as *const Node as u64;
        let a = unsafe { checksum(&n[0] as *const Node as u64) };
        let b = unsafe { checksum(&n[1] as *const Node as u64) };
        assert_ne!(a, b);
        assert_eq!(unsafe { checksum(0) }, 0xcbf2_9ce4_8422_2325);
    }
}
