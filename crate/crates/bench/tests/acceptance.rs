//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any failed.
//!
//! `ACCEPTANCE_ONLY=1,5,10` runs a subset.

use std::io::Write;
use std::time::{Duration, Instant};

use rpcool::config::BusyWaitConfig;
use rpcool::rpc::next_sleep;
use rpcool_bench::coherence::{self, Workload};
use rpcool_bench::harness::Harness;
use rpcool_bench::micro::{self, MicroConfig};
use rpcool_bench::noop::{self, NoopConfig, Via};
use rpcool_bench::{alloctrace, e2e, governance, hostile, sealcheck};

const EXE: &str = env!("CARGO_BIN_EXE_rpcool-bench");

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> anyhow::Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn us(ns: f64) -> String {
    format!("{:.2}us", ns / 1e3)
}

fn harness() -> anyhow::Result<Harness> {
    Harness::private(EXE, |c| c.renew_interval = Duration::from_millis(100))
}

fn seal_safety() -> anyhow::Result<Verdict> {
    let t0 = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for (pages, rounds) in [(1, 20), (2, 20), (16, 10), (1024, 3)] {
        let o = sealcheck::probe(pages, 100, rounds)?;
        ok &= o.ok();
        parts.push(format!(
            "{pages}p: {}/{} stores faulted, {} landed, {}/{} early releases refused",
            o.faulted, o.stores, o.landed, o.early_refused, o.early_releases
        ));
    }
    let el = t0.elapsed();
    ok &= el < Duration::from_secs(60);
    verdict(ok, format!("{}; {:.1}s", parts.join("; "), el.as_secs_f64()))
}

fn sandbox_storm() -> anyhow::Result<Verdict> {
    let t0 = Instant::now();
    let h = harness()?;
    let mut ok = true;
    let mut parts = Vec::new();
    for via in [Via::Shm, Via::Fallback] {
        let o = hostile::run(&h, via, 1000, 7)?;
        ok &= o.ok();
        parts.push(format!(
            "{}: {}/{} violations, {} leaks, secret intact {}, benign ok {}{}",
            via.name(),
            o.violations,
            o.calls,
            o.leaks,
            o.secret_intact,
            o.benign_ok,
            o.others.first().map_or(String::new(), |x| format!(", e.g. {x}"))
        ));
    }
    let el = t0.elapsed();
    ok &= el < Duration::from_secs(120);
    verdict(ok, format!("{}; {:.1}s", parts.join("; "), el.as_secs_f64()))
}

/// Micro rows are shared by criteria 3 and 4.
fn micro_report() -> anyhow::Result<rpcool_bench::report::BenchReport> {
    micro::run(&MicroConfig::default())
}

fn p50(r: &rpcool_bench::report::BenchReport, name: &str) -> anyhow::Result<f64> {
    Ok(r.row(name).ok_or_else(|| anyhow::anyhow!("missing row {name}"))?.p50_us * 1e3)
}

fn cached_sandbox(r: &rpcool_bench::report::BenchReport) -> anyhow::Result<Verdict> {
    let c1 = p50(r, micro::CACHED_1)?;
    let c1024 = p50(r, micro::CACHED_1024)?;
    let un = p50(r, micro::UNCACHED_1)?;
    let spread = c1.max(c1024) / c1.min(c1024);
    verdict(
        c1 < un / 5.0 && spread <= 2.0,
        format!(
            "cached {} vs uncached {} (limit {}); 1p {} vs 1024p {} ratio {spread:.2}",
            us(c1),
            us(un),
            us(un / 5.0),
            us(c1),
            us(c1024)
        ),
    )
}

fn seal_vs_copy(r: &rpcool_bench::report::BenchReport) -> anyhow::Result<Verdict> {
    let seal = p50(r, micro::SEAL_STD_1024)?;
    let copy = p50(r, micro::COPY_1024)?;
    let batch = p50(r, micro::SEAL_BATCH_1)?;
    let std = p50(r, micro::SEAL_STD_1)?;
    verdict(
        seal < 0.5 * copy && batch < std,
        format!(
            "seal+release 1024p {} vs copy {} (limit {}); per-page batch {} vs standard {}",
            us(seal),
            us(copy),
            us(0.5 * copy),
            us(batch),
            us(std)
        ),
    )
}

fn transport_ordering() -> anyhow::Result<Verdict> {
    let h = harness()?;
    let mut m = std::collections::HashMap::new();
    for via in [Via::Shm, Via::Fallback] {
        for secure in [false, true] {
            let cfg = NoopConfig {
                via,
                secure,
                ..Default::default()
            };
            let r = noop::run(&h, &cfg)?;
            m.insert((via, secure), r.rows[0].p50_us * 1e3);
        }
    }
    let ok = m[&(Via::Shm, false)] < m[&(Via::Fallback, false)]
        && m[&(Via::Shm, true)] > m[&(Via::Shm, false)]
        && m[&(Via::Fallback, true)] > m[&(Via::Fallback, false)];
    verdict(
        ok,
        format!(
            "shm plain {} < fallback plain {}; secure > plain: shm {} vs {}, fallback {} vs {}",
            us(m[&(Via::Shm, false)]),
            us(m[&(Via::Fallback, false)]),
            us(m[&(Via::Shm, true)]),
            us(m[&(Via::Shm, false)]),
            us(m[&(Via::Fallback, true)]),
            us(m[&(Via::Fallback, false)])
        ),
    )
}

fn coherence_oracle() -> anyhow::Result<Verdict> {
    let t0 = Instant::now();
    let h = harness()?;
    let w = Workload::generate(11, 10_000, 8, 0.15);
    let o = coherence::run(&h, &w)?;
    let el = t0.elapsed();
    verdict(
        o.ok() && o.ops >= 10_000 && o.race_steps > 0 && el < Duration::from_secs(120),
        format!(
            "{} ops in {} steps ({} same-page races), {} reads checked, {} divergences, {} page moves; {:.1}s",
            o.ops,
            o.steps,
            o.race_steps,
            o.reads_checked,
            o.divergences,
            o.pages_moved,
            el.as_secs_f64()
        ),
    )
}

fn lease_quota() -> anyhow::Result<Verdict> {
    let h = harness()?;
    let l = governance::lease_expiry(&h, 3)?;
    let q = governance::quota_trace(5, 20_000);
    let o = governance::orphans(&h, 3)?;
    let worst = l.worst.iter().max().copied().unwrap_or_default();
    verdict(
        l.ok() && q.ok() && o.ok(),
        format!(
            "lease notices worst {worst:?} (bound {:?}, {} missing); quota {} ops, {} overruns, {} model mismatches; \
             orphans {} survived first sweep, crash reclaim {:?} (bound {:?})",
            l.bound(),
            l.missing,
            q.ops,
            q.overruns,
            q.mismatches,
            o.survived_sweep,
            o.crash_reclaim,
            o.crash_bound
        ),
    )
}

fn allocator() -> anyhow::Result<Verdict> {
    let h = harness()?;
    let o = alloctrace::run(&h, 2, 100_000, 13)?;
    verdict(o.ok(), format!("{o:?}"))
}

fn end_to_end() -> anyhow::Result<Verdict> {
    let h = harness()?;
    let mut ok = true;
    let mut parts = Vec::new();
    for via in [Via::Shm, Via::Fallback] {
        for secure in [false, true] {
            let o = e2e::linked_list(&h, via, secure, 1000, 99)?;
            ok &= o.ok();
            parts.push(format!(
                "{}{}: {:#x} vs {:#x}",
                via.name(),
                if secure { "+secure" } else { "" },
                o.server,
                o.client
            ));
        }
    }
    let c = e2e::cooldb_search(&h, 10_000, 1000, 1)?;
    ok &= c.ok();
    parts.push(format!(
        "cooldb {} docs, {} queries, {} hits, {} mismatches",
        c.docs, c.queries, c.hits, c.mismatches
    ));
    verdict(ok, parts.join("; "))
}

fn busy_wait() -> anyhow::Result<Verdict> {
    let cfg = BusyWaitConfig::default();
    let got: Vec<(f64, Duration)> = [0.20, 0.40, 0.75].iter().map(|&l| (l, next_sleep(&cfg, l))).collect();
    let want = [Duration::ZERO, Duration::from_micros(5), Duration::from_micros(150)];
    verdict(
        got.iter().zip(want).all(|((_, g), w)| *g == w),
        got.iter().map(|(l, d)| format!("{l:.2} -> {d:?}")).collect::<Vec<_>>().join(", "),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |n: u32| only.as_ref().is_none_or(|v| v.contains(&n));

    let mut micro_rows = None;
    let mut failed = 0;
    let names = [
        "seal safety",
        "sandbox confinement",
        "cached sandbox",
        "seal vs copy",
        "transport ordering",
        "coherence oracle",
        "lease/quota",
        "allocator soundness",
        "end-to-end",
        "busy-wait",
    ];
    for (i, name) in names.iter().enumerate() {
        let n = i as u32 + 1;
        if !want(n) {
            continue;
        }
        let t0 = Instant::now();
        let r = match n {
            1 => seal_safety(),
            2 => sandbox_storm(),
            3 | 4 => {
                if micro_rows.is_none() {
                    micro_rows = Some(micro_report());
                }
                match micro_rows.as_ref().unwrap() {
                    Ok(r) if n == 3 => cached_sandbox(r),
                    Ok(r) => seal_vs_copy(r),
                    Err(e) => Err(anyhow::anyhow!("micro benchmarks: {e:#}")),
                }
            }
            5 => transport_ordering(),
            6 => coherence_oracle(),
            7 => lease_quota(),
            8 => allocator(),
            9 => end_to_end(),
            _ => busy_wait(),
        };
        let (pass, detail) = match r {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !pass {
            failed += 1;
        }
        let line = format!(
            "{} [{n:2}] {name}: {detail} ({:.1}s)\n",
            if pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64()
        );
        let mut out = std::io::stdout().lock();
        let _ = out.write_all(line.as_bytes());
        let _ = out.flush();
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
