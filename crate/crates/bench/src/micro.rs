//! Local micro-benchmarks of sandboxes, seals and plain copies.

use std::hint::black_box;
use std::time::Instant;

use rpcool::heap::{Scope, SharedHeap, PAGE};
use rpcool::runtime::scratch_heap;
use rpcool::sandbox::{self, Sandbox};
use rpcool::seal::{Role, SealRing, SealToken};

use crate::report::{BenchReport, Row};
use crate::stats::{sample, sample_with, Summary};

pub const CACHED_1: &str = "Cached sandbox enter+exit (1 page)";
pub const CACHED_1024: &str = "Cached sandbox enter+exit (1024 pages)";
pub const CACHED_MULTI: &str = "Cached multiple sandbox enter+exit (8 x 1 page)";
pub const UNCACHED_1: &str = "Uncached sandbox setup+enter+exit (1 page)";
pub const SEAL_STD_1: &str = "Seal + standard release (1 page)";
pub const SEAL_STD_1024: &str = "Seal + standard release (1024 pages)";
pub const SEAL_BATCH_1: &str = "Seal + batch release (1 page)";
pub const SEAL_BATCH_1024: &str = "Seal + batch release (1024 pages)";
pub const COPY_1: &str = "Byte copy (1 page)";
pub const COPY_1024: &str = "Byte copy (1024 pages)";

/// Row names in table order.
pub const ROWS: [&str; 10] = [
    CACHED_1,
    CACHED_1024,
    CACHED_MULTI,
    UNCACHED_1,
    SEAL_STD_1,
    SEAL_STD_1024,
    SEAL_BATCH_1,
    SEAL_BATCH_1024,
    COPY_1,
    COPY_1024,
];

#[derive(Debug, Clone)]
pub struct MicroConfig {
    /// Samples per row for the 1-page rows.
    pub n: usize,
    /// Samples per row for the 1024-page rows.
    pub n_large: usize,
    /// Scopes released together in the 1-page batch row.
    pub batch: usize,
    /// Scopes released together in the 1024-page batch row.
    pub batch_large: usize,
    /// Distinct sandboxes cycled through by the uncached row; must exceed
    /// the number of cached slots.
    pub uncached_ranges: usize,
}

impl Default for MicroConfig {
    fn default() -> Self {
        Self {
            n: 100_000,
            n_large: 100_000,
            batch: 1024,
            batch_large: 16,
            uncached_ranges: 32,
        }
    }
}

struct Bed {
    heap: SharedHeap,
    tx: SealRing,
    rx: SealRing,
}

impl Bed {
    fn new(size: u64) -> anyhow::Result<Self> {
        let dir = std::env::temp_dir();
        let map = scratch_heap(&dir, size)?;
        let heap = SharedHeap::format(map)?;
        let tx = SealRing::create(&heap, 4096)?;
        let rx = SealRing::open(heap.mapping().clone(), tx.addr(), 4096, Role::Receiver)?;
        Ok(Self { heap, tx, rx })
    }

    /// Page-aligned run of `pages` pages, every page touched.
    fn region(&self, pages: u64) -> anyhow::Result<u64> {
        let a = self.heap.alloc(pages * PAGE, PAGE)?;
        for p in 0..pages {
            // SAFETY: inside a fresh allocation.
            unsafe { std::ptr::write_volatile((a + p * PAGE) as *mut u8, 1) };
        }
        Ok(a)
    }

    fn scopes(&self, count: usize, pages: u64) -> anyhow::Result<Vec<Scope>> {
        let v = self.heap.create_scopes(count, pages * PAGE)?;
        for s in &v {
            for p in 0..pages {
                // SAFETY: inside the scope.
                unsafe { std::ptr::write_volatile((s.start() + p * PAGE + 64) as *mut u8, 1) };
            }
        }
        Ok(v)
    }
}

fn row(name: &str, v: &[u64]) -> Row {
    Row::new(name, "-", mode_of(name), &Summary::of(v).expect("samples"))
}

fn mode_of(name: &str) -> &'static str {
    if name.contains("andbox") {
        "sandbox"
    } else if name.starts_with("Seal") {
        "seal"
    } else {
        "plain"
    }
}

fn enter_exit(start: u64, len: u64) {
    let mut sb = Sandbox::begin(start, len, &[]).expect("sandbox");
    sb.end().expect("sandbox end");
}

pub fn cached_sandbox(bed_pages: u64, n: usize) -> anyhow::Result<Vec<u64>> {
    let bed = Bed::new((bed_pages + 64) * PAGE)?;
    let s = &bed.scopes(1, bed_pages)?[0];
    enter_exit(s.start(), s.len());
    Ok(sample(n, || enter_exit(s.start(), s.len())))
}

fn cached_multi(n: usize) -> anyhow::Result<Vec<u64>> {
    let bed = Bed::new(1 << 20)?;
    let s = bed.scopes(8, 1)?;
    let mut i = 0;
    Ok(sample(n, || {
        let sc = &s[i % s.len()];
        enter_exit(sc.start(), sc.len());
        i += 1;
    }))
}

/// Cycles through more ranges than there are cached slots, so every entry
/// re-keys its range.
pub fn uncached_sandbox(n: usize, ranges: usize) -> anyhow::Result<Vec<u64>> {
    let bed = Bed::new((ranges as u64 + 64) * PAGE * 2)?;
    let s = bed.scopes(ranges, 1)?;
    sandbox::flush_cache();
    let mut i = 0;
    Ok(sample(n, || {
        let sc = &s[i % s.len()];
        enter_exit(sc.start(), sc.len());
        i += 1;
    }))
}

pub fn seal_standard(pages: u64, n: usize) -> anyhow::Result<Vec<u64>> {
    let bed = Bed::new((pages + 64) * PAGE * 2)?;
    let a = bed.region(pages)?;
    let len = pages * PAGE;
    Ok(sample(n, || {
        let t = bed.tx.seal(a, len).expect("seal");
        bed.rx.mark_complete(t).expect("complete");
        bed.tx.release(t).expect("release");
    }))
}

/// Each sample is one seal plus its share of one batched release.
pub fn seal_batch(pages: u64, n: usize, batch: usize) -> anyhow::Result<Vec<u64>> {
    let bed = Bed::new((pages * batch as u64 + 64) * PAGE + (8 << 20))?;
    let scopes = bed.scopes(batch, pages)?;
    let mut out = Vec::with_capacity(n);
    let mut tokens: Vec<SealToken> = Vec::with_capacity(batch);
    let mut each = Vec::with_capacity(batch);
    let mut round = |keep: bool, out: &mut Vec<u64>| {
        tokens.clear();
        each.clear();
        for s in &scopes {
            let t0 = Instant::now();
            let t = bed.tx.seal(s.start(), s.len()).expect("seal");
            bed.rx.mark_complete(t).expect("complete");
            each.push(t0.elapsed().as_nanos() as u64);
            tokens.push(t);
        }
        let t0 = Instant::now();
        let r = bed.tx.release_batch(&tokens);
        let share = t0.elapsed().as_nanos() as u64 / batch as u64;
        assert!(r.iter().all(|x| x.is_ok()), "batch release failed");
        if keep {
            out.extend(each.iter().map(|e| e + share));
        }
    };
    let warm = (n / 10).div_ceil(batch).max(1);
    for _ in 0..warm {
        round(false, &mut out);
    }
    while out.len() < n {
        round(true, &mut out);
    }
    out.truncate(n);
    Ok(out)
}

/// Copies `pages` pages out of a shared heap into private memory.
pub fn byte_copy(pages: u64, n: usize) -> anyhow::Result<Vec<u64>> {
    let bed = Bed::new((pages + 64) * PAGE * 2)?;
    let a = bed.region(pages)?;
    let len = (pages * PAGE) as usize;
    // SAFETY: the region was just allocated and populated.
    let src = unsafe { std::slice::from_raw_parts(a as *const u8, len) };
    let mut dst = vec![0u8; len];
    Ok(sample_with(n, || {
        let t0 = Instant::now();
        dst.copy_from_slice(black_box(src));
        black_box(&mut dst);
        t0.elapsed().as_nanos() as u64
    }))
}

/// Runs every row.
pub fn run(cfg: &MicroConfig) -> anyhow::Result<BenchReport> {
    let mut r = BenchReport::with_host_metadata();
    r.meta("micro.batch", cfg.batch);
    r.meta("micro.batch_large", cfg.batch_large);
    r.meta("micro.uncached_ranges", cfg.uncached_ranges);
    r.meta("sandbox.slots", sandbox::info().slots);
    r.push(row(CACHED_1, &cached_sandbox(1, cfg.n)?));
    r.push(row(CACHED_1024, &cached_sandbox(1024, cfg.n_large)?));
    r.push(row(CACHED_MULTI, &cached_multi(cfg.n)?));
    r.push(row(UNCACHED_1, &uncached_sandbox(cfg.n, cfg.uncached_ranges)?));
    r.push(row(SEAL_STD_1, &seal_standard(1, cfg.n)?));
    r.push(row(SEAL_STD_1024, &seal_standard(1024, cfg.n_large)?));
    r.push(row(SEAL_BATCH_1, &seal_batch(1, cfg.n, cfg.batch)?));
    r.push(row(SEAL_BATCH_1024, &seal_batch(1024, cfg.n_large, cfg.batch_large)?));
    r.push(row(COPY_1, &byte_copy(1, cfg.n)?));
    r.push(row(COPY_1024, &byte_copy(1024, cfg.n_large)?));
    Ok(r)
}
