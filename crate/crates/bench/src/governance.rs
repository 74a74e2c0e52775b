//! Lease expiry after crashes, quota enforcement and orphan reclamation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpcool::orchestrator::{ManualClock, OrchError, Orchestrator};
use rpcool::{HeapId, HolderId, OrchestratorConfig};

use crate::harness::{peer_runtime, reply, serve_stdin, Harness};

/// Peer role `holder new <size>` or `holder <heap>`: maps a heap, prints
/// `READY <heap> <holder>` and reports every failure notice as
/// `NOTE <failed> <heap>`.
pub fn holder(args: &[String]) -> anyhow::Result<()> {
    let rt = peer_runtime(6, true)?;
    let map = match args.first().map(String::as_str) {
        Some("new") => {
            let size = args.get(1).map_or(Ok(1 << 20), |s| s.parse())?;
            rt.alloc_heap(size, None)?
        }
        Some(id) => rt.attach_heap(HeapId(id.parse()?))?,
        None => anyhow::bail!("holder needs `new <size>` or a heap id"),
    };
    let notes = rt.failures();
    std::thread::spawn(move || {
        for n in notes {
            reply(format!("NOTE {} {}", n.failed, n.heap_id));
        }
    });
    serve_stdin(&format!("{} {}", map.heap_id(), rt.holder()), |line| {
        anyhow::ensure!(line == "PING", "unknown command {line:?}");
        reply("PONG");
        Ok(true)
    })
}

#[derive(Debug, Clone, Default)]
pub struct LeaseOutcome {
    pub term: Duration,
    pub trials: usize,
    /// Slowest notice seen by any surviving co-holder, per trial.
    pub worst: Vec<Duration>,
    pub missing: usize,
}

impl LeaseOutcome {
    pub fn bound(&self) -> Duration {
        2 * self.term
    }

    pub fn ok(&self) -> bool {
        self.trials > 0 && self.missing == 0 && self.worst.iter().all(|&d| d <= self.bound())
    }
}

fn holder_id_of(info: &str) -> anyhow::Result<(u64, String)> {
    let mut f = info.split_whitespace();
    let heap = f.next().ok_or_else(|| anyhow::anyhow!("no heap in {info:?}"))?.parse()?;
    let holder = f.next().ok_or_else(|| anyhow::anyhow!("no holder in {info:?}"))?.to_string();
    Ok((heap, holder))
}

/// Each trial: this process and two peers hold one heap, one peer is killed,
/// and the time until this process and the surviving peer hear about it is
/// measured. `h` should run with a short renewal interval.
pub fn lease_expiry(h: &Harness, trials: usize) -> anyhow::Result<LeaseOutcome> {
    let cfg = h
        .orchestrator()
        .map(|o| o.shared().lock().config().clone())
        .ok_or_else(|| anyhow::anyhow!("needs an in-process orchestrator"))?;
    let mut out = LeaseOutcome {
        term: cfg.lease_term(),
        ..Default::default()
    };
    let rt = h.runtime(7)?;
    let notes = rt.failures();
    for _ in 0..trials {
        let map = rt.alloc_heap(1 << 20, None)?;
        let id = map.heap_id().to_string();
        let mut victim = h.spawn("holder", &[&id])?;
        let mut survivor = h.spawn("holder", &[&id])?;
        let (_, victim_id) = holder_id_of(&victim.info)?;
        // Let both renew at least once.
        std::thread::sleep(cfg.renew_interval * 2);
        while notes.try_recv().is_ok() {}
        let t0 = Instant::now();
        victim.kill();

        let mut mine = None;
        let deadline = t0 + out.bound() * 3;
        while mine.is_none() && Instant::now() < deadline {
            if let Ok(n) = notes.recv_timeout(Duration::from_millis(5)) {
                if n.heap_id == map.heap_id() && n.failed.to_string() == victim_id {
                    mine = Some(t0.elapsed());
                }
            }
        }
        // The survivor's report arrives over its stdout.
        let theirs = loop {
            let l = survivor.expect("NOTE")?;
            if l.split_whitespace().next() == Some(victim_id.as_str()) {
                break t0.elapsed();
            }
        };
        out.trials += 1;
        match mine {
            Some(m) => out.worst.push(m.max(theirs)),
            None => out.missing += 1,
        }
        survivor.finish(Duration::from_secs(5))?;
        rt.unmap_heap(map.heap_id())?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct QuotaOutcome {
    pub ops: usize,
    pub granted: usize,
    pub denied: usize,
    /// Times some holder's mapped bytes exceeded its quota.
    pub overruns: usize,
    /// Decisions that differed from the reference model.
    pub mismatches: usize,
}

impl QuotaOutcome {
    pub fn ok(&self) -> bool {
        self.overruns == 0 && self.mismatches == 0 && self.granted > 0 && self.denied > 0
    }
}

/// Random map/unmap traces against an orchestrator with small quotas. A
/// plain model of who maps what predicts every grant and denial.
pub fn quota_trace(seed: u64, ops: usize) -> QuotaOutcome {
    const PAGE: u64 = 4096;
    let cfg = OrchestratorConfig {
        pool_span: 1 << 32,
        ..Default::default()
    };
    let mut o = Orchestrator::with_clock(cfg, ManualClock::new());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let holders: Vec<HolderId> = (0..5).map(|i| HolderId::new(i + 1, 1000 + i, 1)).collect();
    let mut quota: HashMap<HolderId, u64> = HashMap::new();
    for &h in &holders {
        let q = rng.gen_range(4..64) * PAGE;
        o.set_quota(h, q);
        quota.insert(h, q);
    }
    // heap -> (size, holders)
    let mut heaps: BTreeMap<HeapId, (u64, BTreeSet<HolderId>)> = BTreeMap::new();
    let mapped = |heaps: &BTreeMap<HeapId, (u64, BTreeSet<HolderId>)>, h: HolderId| -> u64 {
        heaps.values().filter(|(_, s)| s.contains(&h)).map(|(z, _)| z).sum()
    };
    let mut out = QuotaOutcome::default();

    for _ in 0..ops {
        out.ops += 1;
        let h = holders[rng.gen_range(0..holders.len())];
        let fits = |heaps: &BTreeMap<_, _>, size: u64| mapped(heaps, h) + size <= quota[&h];
        match rng.gen_range(0..10) {
            0..=3 => {
                let size = rng.gen_range(1..=16) * PAGE;
                let expect = fits(&heaps, size);
                match o.allocate_heap(size, h) {
                    Ok((d, _)) => {
                        out.granted += 1;
                        out.mismatches += usize::from(!expect);
                        heaps.insert(d.heap_id, (d.size, BTreeSet::from([h])));
                    }
                    Err(OrchError::QuotaExceeded { .. }) => {
                        out.denied += 1;
                        out.mismatches += usize::from(expect);
                    }
                    Err(_) => out.mismatches += 1,
                }
            }
            4..=6 if !heaps.is_empty() => {
                let ids: Vec<HeapId> = heaps.keys().copied().collect();
                let id = ids[rng.gen_range(0..ids.len())];
                let (size, ref who) = heaps[&id];
                let already = who.contains(&h);
                let expect = already || fits(&heaps, size);
                match o.attach_heap(id, h) {
                    Ok(_) => {
                        out.granted += 1;
                        out.mismatches += usize::from(!expect);
                        heaps.get_mut(&id).unwrap().1.insert(h);
                    }
                    Err(OrchError::QuotaExceeded { .. }) => {
                        out.denied += 1;
                        out.mismatches += usize::from(expect);
                    }
                    Err(_) => out.mismatches += 1,
                }
            }
            7..=8 => {
                let mine: Vec<HeapId> = heaps.iter().filter(|(_, (_, s))| s.contains(&h)).map(|(&k, _)| k).collect();
                if let Some(&id) = mine.get(rng.gen_range(0..mine.len().max(1))) {
                    let e = heaps.get_mut(&id).unwrap();
                    e.1.remove(&h);
                    let last = e.1.is_empty();
                    if last {
                        heaps.remove(&id);
                    }
                    match o.release_heap(id, h) {
                        Ok(reclaimed) => out.mismatches += usize::from(reclaimed != last),
                        Err(_) => out.mismatches += 1,
                    }
                }
            }
            _ => {
                // Quotas change between grants, never below what is
                // already mapped.
                let q = (rng.gen_range(4..64) * PAGE).max(mapped(&heaps, h));
                o.set_quota(h, q);
                quota.insert(h, q);
            }
        }
        for &x in &holders {
            let e = o.ledger_entry(x);
            let model = mapped(&heaps, x);
            if e.mapped != model {
                out.mismatches += 1;
            }
            if e.mapped > e.quota {
                out.overruns += 1;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct OrphanOutcome {
    /// In-process: heaps still live after the first sweep past expiry.
    pub survived_sweep: usize,
    /// In-process: heaps reclaimed before their leases ran out.
    pub reclaimed_early: usize,
    pub orphans: usize,
    /// Crash test: time from the kill until the heap was gone.
    pub crash_reclaim: Option<Duration>,
    pub crash_bound: Duration,
}

impl OrphanOutcome {
    pub fn ok(&self) -> bool {
        self.orphans > 0
            && self.survived_sweep == 0
            && self.reclaimed_early == 0
            && self.crash_reclaim.is_some_and(|d| d <= self.crash_bound)
    }
}

/// Heaps whose holders all stop renewing are reclaimed by the first sweep
/// after their leases lapse, and not before. Checked with a manual clock,
/// then with real crashed processes.
pub fn orphans(h: &Harness, seed: u64) -> anyhow::Result<OrphanOutcome> {
    let mut out = OrphanOutcome::default();
    let clock = Arc::new(ManualClock::new());
    let cfg = OrchestratorConfig::default();
    let term = cfg.lease_term();
    let mut o = Orchestrator::with_clock(cfg, clock.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alive = HolderId::new(1, 1, 1);
    let mut kept = Vec::new();
    let mut orphaned = Vec::new();
    for i in 0..20u32 {
        let dead = HolderId::new(2 + i, 2 + i, 1);
        let (d, _) = o.allocate_heap(rng.gen_range(1..8) * 4096, dead)?;
        if rng.gen_bool(0.5) {
            o.attach_heap(d.heap_id, HolderId::new(100 + i, 100 + i, 1))?;
            orphaned.push(d.heap_id);
        } else {
            o.attach_heap(d.heap_id, alive)?;
            kept.push(d.heap_id);
        }
    }
    out.orphans = orphaned.len();
    // The survivor renews; everyone else goes silent.
    let step = term / 4;
    let mut t = Duration::ZERO;
    while t < term {
        t += step;
        clock.set(t);
        for id in &kept {
            let lease = o.attach_heap(*id, alive)?.1;
            o.renew_lease(lease.lease_id)?;
        }
        o.expire_sweep(t);
        let live: BTreeSet<HeapId> = o.live_heaps().iter().map(|d| d.heap_id).collect();
        out.reclaimed_early += orphaned.iter().filter(|id| !live.contains(id)).count();
    }
    clock.set(term + step);
    for id in &kept {
        let lease = o.attach_heap(*id, alive)?.1;
        o.renew_lease(lease.lease_id)?;
    }
    o.expire_sweep(term + step);
    let live: BTreeSet<HeapId> = o.live_heaps().iter().map(|d| d.heap_id).collect();
    out.survived_sweep = orphaned.iter().filter(|id| live.contains(id)).count();
    out.survived_sweep += kept.iter().filter(|id| !live.contains(id)).count();

    // Two crashed processes sharing one heap.
    let shared = h
        .orchestrator()
        .ok_or_else(|| anyhow::anyhow!("needs an in-process orchestrator"))?
        .shared()
        .clone();
    let term = shared.lock().config().lease_term();
    let mut a = h.spawn("holder", &["new", "65536"])?;
    let (id, _) = holder_id_of(&a.info)?;
    let mut b = h.spawn("holder", &[&id.to_string()])?;
    let t0 = Instant::now();
    a.kill();
    b.kill();
    // Sweeps run every quarter term, so the heap must be gone one lease
    // term plus one sweep period after the last renewal.
    out.crash_bound = term + term / 4 + term / 4;
    while t0.elapsed() < 4 * term {
        if !shared.lock().live_heaps().iter().any(|d| d.heap_id.0 == id) {
            out.crash_reclaim = Some(t0.elapsed());
            break;
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quota_model_agrees() {
        let o = quota_trace(11, 5000);
        assert!(o.ok(), "{o:?}");
    }
}
