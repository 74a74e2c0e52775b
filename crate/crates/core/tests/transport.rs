//! Calls between processes over shared memory and over the fallback.

mod common;

use common::*;
use rpcool::heap::{ShmAlloc, ShmPtr};
use rpcool::rpc::{CallOptions, ChannelConfig, Connection, HandlerOptions, RpcError, Server, Transport};

const SUM: u32 = 1;
const BUMP: u32 = 2;
const FILL: u32 = 3;

#[repr(C)]
#[derive(Clone, Copy)]
struct Node {
    value: u64,
    next: u64,
}

fn checksum(mut p: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    while p != 0 {
        let n = unsafe { *(p as *const Node) };
        h = (h ^ n.value).wrapping_mul(0x0100_0000_01b3);
        p = n.next;
    }
    h
}

fn serve(name: &str) {
    let rt = peer_runtime(1, true);
    let srv = Server::create(&rt, name, ChannelConfig::default()).unwrap();
    srv.register(SUM, |ctx| Ok(checksum(ctx.arg()))).unwrap();
    srv.register(BUMP, |ctx| {
        let p = ctx.arg_ptr::<u64>();
        unsafe { *p.as_mut() += 1 };
        Ok(unsafe { *p.as_ref() })
    })
    .unwrap();
    srv.register_with(FILL, HandlerOptions::default(), |ctx| {
        // Writes a pattern over the whole scope, page by page.
        let (s, l) = ctx.scope_range().ok_or(1u32)?;
        let base = s + 4096;
        for a in (base..s + l).step_by(8) {
            unsafe { *(a as *mut u64) = a };
        }
        Ok(l)
    })
    .unwrap();
    srv.start().unwrap();
    ready_and_wait(&srv.fallback_addr().unwrap().to_string(), |_| {});
    srv.shutdown();
}

#[test]
fn peer_role() {
    if let Some((role, arg)) = role() {
        match role.as_str() {
            "server" => serve(&arg),
            r => panic!("unknown role {r}"),
        }
    }
}

fn build_list(conn: &Connection, n: usize, alloc: &impl ShmAlloc) -> (u64, u64) {
    let mut head = 0u64;
    for i in (0..n as u64).rev() {
        head = alloc
            .alloc_value(Node {
                value: i.wrapping_mul(0x9e37_79b9_7f4a_7c15),
                next: head,
            })
            .unwrap()
            .addr();
    }
    let _ = conn;
    (head, checksum(head))
}

fn exercise(conn: &Connection) {
    // Linked list as the argument.
    let (head, sum) = build_list(conn, 1000, conn.heap());
    assert_eq!(conn.call(SUM, head).unwrap(), sum);

    // Server writes, client sees it, repeatedly.
    let p: ShmPtr<u64> = conn.heap().alloc_value(10u64).unwrap();
    for i in 0..50 {
        assert_eq!(conn.call(BUMP, p.addr()).unwrap(), 11 + i);
        assert_eq!(unsafe { *p.as_ref() }, 11 + i);
        unsafe { *p.as_mut() += 0 };
    }

    // Secure call with the list inside a scope.
    let scope = conn.create_scope(64 << 10).unwrap();
    let (head, sum) = build_list(conn, 1000, &scope);
    assert_eq!(conn.call_secure(SUM, head, &scope).unwrap(), sum);

    // A pointer out of the scope is a violation, and the server survives.
    let outside = conn.heap().alloc_value(Node { value: 1, next: 0 }).unwrap();
    let tail = scope.alloc_value(Node { value: 2, next: outside.addr() }).unwrap();
    for _ in 0..5 {
        assert!(matches!(
            conn.call_secure(SUM, tail.addr(), &scope),
            Err(RpcError::SandboxViolation)
        ));
    }
    assert_eq!(conn.call_secure(SUM, head, &scope).unwrap(), sum);

    // Server fills a scope; the client reads it back.
    let big = conn.create_scope(16 * 4096).unwrap();
    let opts = CallOptions { seal: true, sandbox: false };
    assert_eq!(conn.call_scoped(FILL, 0, &big, opts).unwrap(), big.len());
    for a in (big.start() + 4096..big.end()).step_by(8) {
        assert_eq!(unsafe { *(a as *const u64) }, a);
    }
}

#[test]
fn shared_memory_across_processes() {
    let c = Cluster::new();
    let peer = c.spawn("peer_role", "server", "/x/shm");
    let rt = c.runtime(2);
    let conn = Connection::connect(&rt, "/x/shm").unwrap();
    assert_eq!(conn.transport(), Transport::SharedMemory);
    exercise(&conn);
    drop(conn);
    peer.finish();
}

#[test]
fn fallback_across_processes() {
    let c = Cluster::new();
    let peer = c.spawn("peer_role", "server", "/x/fb");
    let rt = c.remote_runtime(3);
    let conn = Connection::connect(&rt, "/x/fb").unwrap();
    assert_eq!(conn.transport(), Transport::Fallback);
    exercise(&conn);
    let st = conn.session().unwrap().stats();
    assert!(st.pages_in > 0 && st.pages_out > 0, "{st:?}");
    drop(conn);
    peer.finish();
}
