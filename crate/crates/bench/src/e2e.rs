//! End-to-end checks: a pointer-rich argument over each transport, and
//! CoolDB search against a flat scan.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rpcool::heap::PAGE;
use serde_json::Value;

use crate::cooldb::{flat_scan, CoolDb, CoolDbError};
use crate::echo::{build_list, checksum, SUM};
use crate::harness::Harness;
use crate::nobench::{queries, Generator};
use crate::noop::{connect, Via};
use crate::report::{BenchReport, Row};
use crate::stats::{warmup_for, Summary};
use crate::ycsb::Workload;

#[derive(Debug, Clone)]
pub struct ListOutcome {
    pub via: Via,
    pub secure: bool,
    pub nodes: usize,
    pub client: u64,
    pub server: u64,
}

impl ListOutcome {
    pub fn ok(&self) -> bool {
        self.client == self.server
    }
}

/// Sends an `nodes`-node linked list to an echo peer, which folds it.
pub fn linked_list(h: &Harness, via: Via, secure: bool, nodes: usize, seed: u64) -> anyhow::Result<ListOutcome> {
    let channel = format!("/bench/list/{}/{}/{}", std::process::id(), via.name(), secure);
    let peer = h.spawn("echo", &[&channel])?;
    let conn = connect(h, 30, &channel, via)?;
    let server = if secure {
        // Nodes take 16 bytes each; leave room for alignment.
        let scope = conn.create_scope(((nodes as u64 * 32) / PAGE + 1) * PAGE)?;
        let head = build_list(&scope, nodes, seed)?;
        conn.call_secure(SUM, head, &scope)?
    } else {
        let head = build_list(conn.heap(), nodes, seed)?;
        conn.call(SUM, head)?
    };
    // The client folds its own copy, built the same way.
    let local = rpcool::sandbox::PrivateRegion::new(nodes * 32 + 4096)?;
    let client = fold_private(&local, nodes, seed)?;
    drop(conn);
    peer.finish(Duration::from_secs(10))?;
    Ok(ListOutcome {
        via,
        secure,
        nodes,
        client,
        server,
    })
}

fn fold_private(r: &rpcool::sandbox::PrivateRegion, nodes: usize, seed: u64) -> anyhow::Result<u64> {
    let bump = std::cell::Cell::new(r.addr());
    let a = Bump(r.addr() + r.len() as u64, &bump);
    let head = build_list(&a, nodes, seed)?;
    // SAFETY: a list just built in private memory.
    Ok(unsafe { checksum(head) })
}

/// Bump allocator over a private region.
struct Bump<'a>(u64, &'a std::cell::Cell<u64>);

impl rpcool::heap::ShmAlloc for Bump<'_> {
    fn alloc_bytes(&self, size: u64, align: u64) -> Result<u64, rpcool::heap::HeapError> {
        let at = self.1.get().next_multiple_of(align.max(1));
        if at + size > self.0 {
            return Err(rpcool::heap::HeapError::OutOfMemory { requested: size });
        }
        self.1.set(at + size);
        Ok(at)
    }

    fn free_bytes(&self, _: u64) -> Result<(), rpcool::heap::HeapError> {
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct CoolDbOutcome {
    pub docs: u64,
    pub queries: u64,
    pub hits: u64,
    /// Queries whose result differed from the flat scan.
    pub mismatches: u64,
    /// Sampled `get`s whose document differed from what was put.
    pub bad_gets: u64,
    pub secure_puts: u64,
    pub missing_key_error: bool,
    pub bad_predicate_error: bool,
    /// Per-call latencies in nanoseconds.
    pub put_ns: Vec<u64>,
    pub search_ns: Vec<u64>,
}

impl CoolDbOutcome {
    pub fn ok(&self) -> bool {
        self.docs > 0
            && self.queries > 0
            && self.mismatches == 0
            && self.bad_gets == 0
            && self.missing_key_error
            && self.bad_predicate_error
    }
}

/// Loads `docs` seeded documents into a CoolDB peer and compares `nq`
/// range searches with a flat scan of the same documents.
pub fn cooldb_search(h: &Harness, docs: u64, nq: usize, seed: u64) -> anyhow::Result<CoolDbOutcome> {
    let channel = format!("/bench/cooldb/{}", std::process::id());
    let peer = h.spawn("cooldb", &[&channel])?;
    let rt = h.runtime(31)?;
    let db = CoolDb::connect(&rt, &channel)?;
    let mut out = CoolDbOutcome {
        docs,
        queries: nq as u64,
        ..Default::default()
    };

    let mut all: BTreeMap<String, Value> = BTreeMap::new();
    let scope = db.connection().create_scope(64 * PAGE)?;
    for (i, (k, v)) in Generator::new(seed, docs).take(docs as usize).enumerate() {
        // Every 64th document goes through the sealed path.
        let t = Instant::now();
        if i % 64 == 0 {
            db.put_secure(&k, &v, &scope)?;
            out.secure_puts += 1;
        } else {
            db.put(&k, &v)?;
        }
        out.put_ns.push(t.elapsed().as_nanos() as u64);
        all.insert(k, v);
    }
    anyhow::ensure!(db.len()? == docs, "store holds {} documents, expected {docs}", db.len()?);

    for q in queries(seed, docs, nq) {
        let t = Instant::now();
        let got = db.search(q.path, q.lo, q.hi)?;
        out.search_ns.push(t.elapsed().as_nanos() as u64);
        let want = flat_scan(&all, q.path, q.lo, q.hi);
        out.hits += got.len() as u64;
        if got != want {
            out.mismatches += 1;
        }
    }

    for (k, v) in all.iter().step_by((docs as usize / 100).max(1)) {
        if db.get(k)?.to_value() != *v {
            out.bad_gets += 1;
        }
    }
    out.missing_key_error = matches!(db.get("no-such-doc"), Err(CoolDbError::Missing(_)));
    out.bad_predicate_error = matches!(db.search("num..x", 0.0, 1.0), Err(CoolDbError::Predicate(_)))
        && matches!(db.search("num", 5.0, 1.0), Err(CoolDbError::Predicate(_)));

    drop(db);
    peer.finish(Duration::from_secs(10))?;
    Ok(out)
}

/// YCSB workloads against a CoolDB peer loaded with `records` records.
/// A tenth of `ops` runs first as discarded warmup.
pub fn ycsb(h: &Harness, workloads: &[Workload], records: u64, ops: u64, seed: u64) -> anyhow::Result<BenchReport> {
    let mut r = BenchReport::with_host_metadata();
    r.meta("ycsb.records", records);
    r.meta("ycsb.zipf", crate::ycsb::ZIPF_CONSTANT);
    for (i, &w) in workloads.iter().enumerate() {
        let channel = format!("/bench/ycsb/{}/{}", std::process::id(), w.name());
        let peer = h.spawn("cooldb", &[&channel])?;
        let rt = h.runtime(40 + i as u32)?;
        let mut db = CoolDb::connect(&rt, &channel)?;
        crate::ycsb::load(&mut db, records, seed).map_err(anyhow::Error::msg)?;
        crate::ycsb::run(&mut db, w, records, warmup_for(ops as usize) as u64, seed ^ 1).map_err(anyhow::Error::msg)?;
        let o = crate::ycsb::run(&mut db, w, records, ops, seed).map_err(anyhow::Error::msg)?;
        anyhow::ensure!(o.misses == 0, "workload {} missed {} reads", w.name(), o.misses);
        let ns: Vec<u64> = o.latencies.iter().map(|d| d.as_nanos() as u64).collect();
        let s = Summary::of(&ns).ok_or_else(|| anyhow::anyhow!("no operations"))?;
        let tp = ops as f64 / o.elapsed.as_secs_f64();
        r.push(Row::new(format!("CoolDB YCSB-{}", w.name()), "shm", "plain", &s).with_throughput(tp));
        drop(db);
        peer.finish(Duration::from_secs(10))?;
    }
    Ok(r)
}

/// Report rows for a [`cooldb_search`] run.
pub fn cooldb_rows(o: &CoolDbOutcome) -> BenchReport {
    let mut r = BenchReport::with_host_metadata();
    r.meta("cooldb.docs", o.docs);
    r.meta("cooldb.secure_puts", o.secure_puts);
    r.meta("cooldb.hits", o.hits);
    r.meta("cooldb.mismatches", o.mismatches);
    if let Some(s) = Summary::of(&o.put_ns) {
        r.push(Row::new("CoolDB put", "shm", "plain", &s));
    }
    if let Some(s) = Summary::of(&o.search_ns) {
        r.push(Row::new("CoolDB search", "shm", "plain", &s));
    }
    r
}
