//! Exhaustive store probes against sealed ranges.

use std::time::{Duration, Instant};

use rpcool::heap::{SharedHeap, PAGE};
use rpcool::runtime::{catch, scratch_heap};
use rpcool::seal::{Role, SealError, SealRing};

/// Byte offsets probed in every sealed page.
pub const OFFSETS: [u64; 4] = [0, 8, 2048, PAGE - 8];

#[derive(Debug, Clone, Default)]
pub struct SealOutcome {
    pub pages: u64,
    pub stores: u64,
    /// Stores that faulted.
    pub faulted: u64,
    /// Stores whose value became visible.
    pub landed: u64,
    pub early_releases: u64,
    pub early_refused: u64,
    pub elapsed: Duration,
}

impl SealOutcome {
    pub fn ok(&self) -> bool {
        self.stores > 0
            && self.faulted == self.stores
            && self.landed == 0
            && self.early_releases > 0
            && self.early_refused == self.early_releases
    }
}

fn try_store(addr: u64, v: u64) -> bool {
    // SAFETY: addr is inside a mapped heap; a sealed page faults and the
    // fault is caught.
    catch(|| unsafe { std::ptr::write_volatile(addr as *mut u64, v) }).is_ok()
}

fn read(addr: u64) -> u64 {
    // SAFETY: mapped and readable.
    unsafe { std::ptr::read_volatile(addr as *const u64) }
}

/// Seals `pages` pages, tries a store at every probe offset of every page
/// from this thread and from another, and tries `early` releases before the
/// receiver has finished.
pub fn probe(pages: u64, early: u64, rounds: u64) -> anyhow::Result<SealOutcome> {
    let t0 = Instant::now();
    let map = scratch_heap(&std::env::temp_dir(), (pages + 64) * PAGE)?;
    let heap = SharedHeap::format(map)?;
    let tx = SealRing::create(&heap, 64)?;
    let rx = SealRing::open(heap.mapping().clone(), tx.addr(), 64, Role::Receiver)?;
    let base = heap.alloc(pages * PAGE, PAGE)?;
    let mut out = SealOutcome {
        pages,
        ..Default::default()
    };
    let probes: Vec<u64> = (0..pages).flat_map(|p| OFFSETS.map(|o| base + p * PAGE + o)).collect();

    for round in 0..rounds {
        let fill = 0x1111_0000_0000_0000 | round;
        for &a in &probes {
            // SAFETY: unsealed, writable.
            unsafe { std::ptr::write_volatile(a as *mut u64, fill) };
        }
        let t = tx.seal(base, pages * PAGE)?;
        let (same, other) = std::thread::scope(|s| {
            let h = s.spawn(|| probes.iter().filter(|&&a| try_store(a, !fill)).count() as u64);
            let same = probes.iter().filter(|&&a| try_store(a, !fill ^ 1)).count() as u64;
            (same, h.join().expect("probe thread"))
        });
        out.stores += 2 * probes.len() as u64;
        out.faulted += 2 * probes.len() as u64 - same - other;
        out.landed += probes.iter().filter(|&&a| read(a) != fill).count() as u64;

        for _ in 0..early {
            out.early_releases += 1;
            if matches!(tx.release(t), Err(SealError::WrongState { .. })) && tx.is_sealed(t, base, pages * PAGE) {
                out.early_refused += 1;
            }
        }
        // A refused release leaves the range sealed.
        let a = probes[probes.len() / 2];
        out.stores += 1;
        if try_store(a, !fill) {
            out.landed += 1;
        } else {
            out.faulted += 1;
        }
        rx.mark_complete(t)?;
        tx.release(t)?;
        anyhow::ensure!(try_store(base, fill), "range not writable after release");
    }
    out.elapsed = t0.elapsed();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_ranges_hold() {
        for pages in [1, 3] {
            let o = probe(pages, 5, 2).unwrap();
            assert!(o.ok(), "{o:?}");
            assert_eq!(o.stores, 2 * (2 * pages * OFFSETS.len() as u64 + 1));
        }
    }
}
