//! CoolDB server and client in one process.

use std::collections::BTreeMap;
use std::time::Duration;

use rpcool::heap::{ShmAlloc, PAGE};
use rpcool::rpc::{CallOptions, RpcError};
use rpcool_bench::cooldb::{self, doc, flat_scan, CoolDb, CoolDbError, PutReq, PUT_SECURE};
use rpcool_bench::harness::Harness;
use rpcool_bench::nobench::Generator;
use rpcool_bench::ycsb::{self, Workload};
use serde_json::json;

fn setup(channel: &str) -> (Harness, rpcool::runtime::NodeRuntime, rpcool::rpc::Server, CoolDb) {
    let h = Harness::private(env!("CARGO_BIN_EXE_rpcool-bench"), |c| c.renew_interval = Duration::from_millis(200)).unwrap();
    let srv_rt = h.runtime(1).unwrap();
    let srv = cooldb::serve(&srv_rt, channel, 32 << 20).unwrap();
    let cli_rt = h.runtime(2).unwrap();
    let db = CoolDb::connect(&cli_rt, channel).unwrap();
    (h, srv_rt, srv, db)
}

#[test]
fn put_get_search() {
    let (_h, _rt, srv, db) = setup("/test/cooldb/basic");
    assert!(db.is_empty().unwrap());
    let mut all = BTreeMap::new();
    for (k, v) in Generator::new(4, 300).take(300) {
        db.put(&k, &v).unwrap();
        all.insert(k, v);
    }
    assert_eq!(db.len().unwrap(), 300);
    let d = db.get("doc00000042").unwrap();
    assert_eq!(d.to_value(), all["doc00000042"]);
    for (path, lo, hi) in [("num", 0.0, 30.0), ("nested_obj.num", 100.0, 140.0), ("thousandth", 7.0, 7.0), ("dyn1", 0.0, 1e9)] {
        assert_eq!(db.search(path, lo, hi).unwrap(), flat_scan(&all, path, lo, hi), "{path}");
    }
    // A path no document has matches nothing.
    assert!(db.search("nope.deeper", 0.0, 1.0).unwrap().is_empty());
    srv.shutdown();
}

#[test]
fn errors() {
    let (_h, _rt, srv, db) = setup("/test/cooldb/errors");
    db.put("a", &json!({"n": 1})).unwrap();
    assert!(matches!(db.get("b"), Err(CoolDbError::Missing(k)) if k == "b"));
    assert!(matches!(db.search("", 0.0, 1.0), Err(CoolDbError::Predicate(_))));
    assert!(matches!(db.search("n..m", 0.0, 1.0), Err(CoolDbError::Predicate(_))));
    assert!(matches!(db.search("n", 2.0, 1.0), Err(CoolDbError::Predicate(_))));
    assert!(matches!(db.search("n", f64::NAN, 1.0), Err(CoolDbError::Predicate(_))));
    assert_eq!(db.search("n", 0.0, 1.0).unwrap(), ["a"]);
    srv.shutdown();
}

#[test]
fn put_replaces_and_frees() {
    let (_h, _rt, srv, db) = setup("/test/cooldb/replace");
    let heap = db.connection().heap().clone();
    db.put("k", &json!({"v": [1, 2, 3], "s": "x"})).unwrap();
    let before = heap.stats().live_allocations;
    for i in 0..50 {
        db.put("k", &json!({"v": [i, 2, 3], "s": "x"})).unwrap();
    }
    assert_eq!(heap.stats().live_allocations, before);
    assert_eq!(db.get("k").unwrap().to_value()["v"][0], json!(49));
    assert_eq!(db.len().unwrap(), 1);
    srv.shutdown();
}

#[test]
fn secure_put_copies_out_of_scope() {
    let (_h, _rt, srv, db) = setup("/test/cooldb/secure");
    let scope = db.connection().create_scope(16 * PAGE).unwrap();
    let v = json!({"name": "sealed", "num": 12, "tags": ["a", "b"]});
    db.put_secure("s", &v, &scope).unwrap();
    // The scope is reused; the stored copy must not change with it.
    db.put_secure("t", &json!({"num": 99}), &scope).unwrap();
    let d = db.get("s").unwrap();
    assert!(!scope.contains(d.0));
    assert_eq!(d.to_value(), v);
    assert_eq!(db.search("num", 0.0, 100.0).unwrap(), ["s", "t"]);
    srv.shutdown();
}

#[test]
fn secure_put_rejects_references_outside_scope() {
    let (_h, _rt, srv, db) = setup("/test/cooldb/hostile");
    let conn = db.connection();
    let outside = doc::encode(conn.heap(), &json!({"num": 5})).unwrap();
    let scope = conn.create_scope(4 * PAGE).unwrap();
    let key = scope.alloc_slice(b"evil").unwrap();
    let req = scope
        .alloc_value(PutReq {
            key: doc::KeyRef { ptr: key.addr(), len: 4 },
            doc: outside,
        })
        .unwrap();
    let r = conn.call_scoped(PUT_SECURE, req.addr(), &scope, CallOptions { seal: true, sandbox: false });
    assert!(matches!(r, Err(RpcError::Remote(cooldb::ERR_INVALID_DOC))), "{r:?}");
    // Unsealed calls are refused outright.
    let r = conn.call(PUT_SECURE, req.addr());
    assert!(r.is_err());
    assert!(matches!(db.get("evil"), Err(CoolDbError::Missing(_))));
    db.put("fine", &json!(1)).unwrap();
    srv.shutdown();
}

#[test]
fn ycsb_over_cooldb() {
    let (_h, _rt, srv, mut db) = setup("/test/cooldb/ycsb");
    ycsb::load(&mut db, 200, 1).unwrap();
    for w in Workload::ALL {
        let o = ycsb::run(&mut db, w, 200, 500, 2).unwrap();
        assert_eq!(o.misses, 0, "{w:?}");
    }
    srv.shutdown();
}
