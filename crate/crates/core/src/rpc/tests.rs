use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::*;
use crate::heap::ShmAlloc;
use crate::ids::HolderId;
use crate::orchestrator::{LocalOrchestrator, Orchestrator, SharedOrchestrator};
use crate::runtime::NodeRuntime;
use crate::{OrchestratorConfig, RuntimeConfig};

struct Cluster {
    server: NodeRuntime,
    client: NodeRuntime,
    _dir: tempfile::TempDir,
}

/// Two runtimes in this process sharing one orchestrator and pool. Each
/// cluster gets its own address range so tests can run in parallel.
fn cluster() -> Cluster {
    static NEXT: AtomicU64 = AtomicU64::new(0);
    let n = NEXT.fetch_add(1, Ordering::Relaxed);
    let dir = tempfile::tempdir().unwrap();
    let ocfg = OrchestratorConfig {
        pool_base: 0x7B00_0000_0000 + n * (1 << 36),
        pool_span: 1 << 36,
        ..Default::default()
    };
    let shared = SharedOrchestrator::new(Orchestrator::new(ocfg));
    let cfg = RuntimeConfig::default().with_pool_dir(dir.path());
    let rt = |node| {
        let h = HolderId::for_current_process(node);
        NodeRuntime::new(cfg.clone(), Arc::new(LocalOrchestrator::new(shared.clone(), h))).unwrap()
    };
    Cluster {
        server: rt(1),
        client: rt(2),
        _dir: dir,
    }
}

fn small() -> ChannelConfig {
    ChannelConfig {
        heap_size: 8 << 20,
        fallback: false,
        ..Default::default()
    }
}

#[test]
fn function_ids_are_stable_and_unreserved() {
    assert_eq!(function_id("ping"), function_id("ping"));
    assert_ne!(function_id("ping"), function_id("pong"));
    for name in ["", "a", "search", "\u{ff}\u{ff}\u{ff}"] {
        assert!(function_id(name) < FIRST_RESERVED_FUNCTION);
    }
}

#[test]
fn ping_pong_over_shared_memory() {
    let c = cluster();
    let srv = Server::create(&c.server, "/t/ping", small()).unwrap();
    srv.register(1, |ctx| {
        let v = unsafe { ctx.arg_ptr::<u64>().as_ref() };
        Ok(*v + 1)
    })
    .unwrap();
    srv.start().unwrap();
    let conn = Connection::connect(&c.client, "/t/ping").unwrap();
    assert_eq!(conn.transport(), Transport::SharedMemory);
    let p = conn.heap().alloc_value(41u64).unwrap();
    for i in 0..100u64 {
        unsafe { *p.as_mut() = i };
        assert_eq!(conn.call(1, p.addr()).unwrap(), i + 1);
    }
    assert_eq!(srv.served(), 100);
    assert_eq!(srv.connections().0, 1);
}

#[test]
fn errors_map_to_variants() {
    let c = cluster();
    let srv = Server::create(&c.server, "/t/err", small()).unwrap();
    srv.register(1, |_| Err(7)).unwrap();
    srv.register(2, |ctx| {
        ctx.respond(Ok(5)).unwrap();
        assert!(matches!(ctx.respond(Ok(6)), Err(RpcError::DoubleRespond)));
        assert!(matches!(ctx.respond(Err(FIRST_BUILTIN_CODE)), Err(RpcError::CodeOutOfRange(_))));
        Ok(99)
    })
    .unwrap();
    srv.register(3, |_| panic!("handler bug")).unwrap();
    assert!(matches!(srv.register(1, |_| Ok(0)), Err(RpcError::DuplicateHandler(1))));
    assert!(matches!(
        srv.register(FN_CONNECT, |_| Ok(0)),
        Err(RpcError::ReservedFunction(_))
    ));
    srv.start().unwrap();
    let conn = Connection::connect(&c.client, "/t/err").unwrap();
    assert!(matches!(conn.call(1, 0), Err(RpcError::Remote(7))));
    assert_eq!(conn.call(2, 0).unwrap(), 5);
    assert!(matches!(conn.call(3, 0), Err(RpcError::HandlerPanic)));
    assert!(matches!(conn.call(77, 0), Err(RpcError::UnknownFunction(77))));
    assert!(matches!(conn.call(1, 0x10), Err(RpcError::BadArgument)));
    // Still serving after all of that.
    assert!(matches!(conn.call(1, 0), Err(RpcError::Remote(7))));
}

#[test]
fn sealed_call_is_verified_and_released() {
    let c = cluster();
    let srv = Server::create(&c.server, "/t/seal", small()).unwrap();
    let f = srv
        .register_named(
            "sum",
            HandlerOptions {
                require_seal: true,
                sandbox: false,
            },
            |ctx| {
                assert!(ctx.is_sealed());
                let (s, _) = ctx.scope_range().unwrap();
                let n = unsafe { *(ctx.arg() as *const u64) };
                let xs = unsafe { std::slice::from_raw_parts((ctx.arg() + 8) as *const u64, n as usize) };
                assert!(ctx.arg() >= s);
                Ok(xs.iter().sum())
            },
        )
        .unwrap();
    srv.start().unwrap();
    let conn = Connection::connect(&c.client, "/t/seal").unwrap();
    let scope = conn.create_scope(8192).unwrap();
    let arg = scope.alloc_slice(&[3u64, 10, 20, 30]).unwrap();
    assert!(matches!(
        conn.call_scoped(f, arg.addr(), &scope, CallOptions::default()),
        Err(RpcError::SealVerification)
    ));
    let opts = CallOptions {
        seal: true,
        sandbox: false,
    };
    assert_eq!(conn.call_scoped(f, arg.addr(), &scope, opts).unwrap(), 60);
    // Released: the client may write again.
    unsafe { *arg.as_mut() = 2 };
    assert_eq!(conn.call_scoped(f, arg.addr(), &scope, opts).unwrap(), 30);
    assert_eq!(conn.seal_ring().active(), 0);
}

#[repr(C)]
#[derive(Clone, Copy)]
struct Node {
    value: u64,
    next: u64,
}

#[test]
fn sandboxed_handler_cannot_leave_its_scope() {
    let c = cluster();
    let srv = Server::create(&c.server, "/t/sbx", small()).unwrap();
    let walk = srv
        .register_named(
            "walk",
            HandlerOptions {
                require_seal: false,
                sandbox: true,
            },
            |ctx| {
                let mut sum = 0u64;
                let mut p = ctx.arg();
                while p != 0 {
                    let n = unsafe { *(p as *const Node) };
                    sum = sum.wrapping_add(n.value);
                    p = n.next;
                }
                Ok(sum)
            },
        )
        .unwrap();
    srv.start().unwrap();
    let conn = Connection::connect(&c.client, "/t/sbx").unwrap();
    let outside = conn.heap().alloc_value(Node { value: 1000, next: 0 }).unwrap();
    let scope = conn.create_scope(4096 * 4).unwrap();
    let tail = scope.alloc_value(Node { value: 2, next: 0 }).unwrap();
    let head = scope.alloc_value(Node { value: 1, next: tail.addr() }).unwrap();
    assert_eq!(conn.call_secure(walk, head.addr(), &scope).unwrap(), 3);
    unsafe { tail.as_mut().next = outside.addr() };
    for _ in 0..20 {
        assert!(matches!(
            conn.call_secure(walk, head.addr(), &scope),
            Err(RpcError::SandboxViolation)
        ));
    }
    unsafe { tail.as_mut().next = 0 };
    assert_eq!(conn.call_secure(walk, head.addr(), &scope).unwrap(), 3);
}

#[test]
fn channel_wide_heap_is_shared_by_connections() {
    let c = cluster();
    let cfg = ChannelConfig {
        heap_mode: crate::orchestrator::HeapMode::ChannelWide,
        ..small()
    };
    let srv = Server::create(&c.server, "/t/wide", cfg).unwrap();
    srv.register(1, |ctx| Ok(ctx.heap().base())).unwrap();
    srv.start().unwrap();
    let a = Connection::connect(&c.client, "/t/wide").unwrap();
    let b = Connection::connect(&c.client, "/t/wide").unwrap();
    assert_eq!(a.heap().base(), b.heap().base());
    assert_eq!(a.call(1, 0).unwrap(), a.heap().base());
    assert_eq!(b.call(1, 0).unwrap(), b.heap().base());
    assert_eq!(srv.connections().0, 2);
}

#[test]
fn concurrent_callers_get_their_own_answers() {
    let c = cluster();
    let cfg = ChannelConfig {
        workers: Some(2),
        ..small()
    };
    let srv = Server::create(&c.server, "/t/many", cfg).unwrap();
    srv.register(1, |ctx| Ok(ctx.arg() ^ 0xABCD)).unwrap();
    srv.start().unwrap();
    let conn = Arc::new(Connection::connect(&c.client, "/t/many").unwrap());
    let base = conn.heap().base();
    let threads: Vec<_> = (0..4u64)
        .map(|t| {
            let conn = conn.clone();
            std::thread::spawn(move || {
                for i in 0..500u64 {
                    let a = base + t * 4096 + i;
                    assert_eq!(conn.call(1, a).unwrap(), a ^ 0xABCD);
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
}

#[test]
fn shutdown_fails_calls_and_disconnect_is_seen() {
    let c = cluster();
    let srv = Server::create(&c.server, "/t/down", small()).unwrap();
    srv.register(1, |_| Ok(1)).unwrap();
    srv.start().unwrap();
    {
        let conn = Connection::connect(&c.client, "/t/down").unwrap();
        assert_eq!(conn.call(1, 0).unwrap(), 1);
    }
    let t0 = std::time::Instant::now();
    while srv.connections().0 != 0 {
        assert!(t0.elapsed().as_secs() < 5, "disconnect not processed");
        std::thread::sleep(std::time::Duration::from_millis(1));
    }
    let conn = Connection::connect(&c.client, "/t/down").unwrap();
    srv.shutdown();
    assert!(matches!(conn.call(1, 0), Err(RpcError::Shutdown)));
}
