//! First-fit allocation of heap address ranges over the configured pool.

use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct AddressSpace {
    base: u64,
    span: u64,
    /// Free extents keyed by start address, always coalesced.
    free: BTreeMap<u64, u64>,
}

impl AddressSpace {
    pub fn new(base: u64, span: u64) -> Self {
        let mut free = BTreeMap::new();
        if span > 0 {
            free.insert(base, span);
        }
        Self { base, span, free }
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn span(&self) -> u64 {
        self.span
    }

    pub fn free_bytes(&self) -> u64 {
        self.free.values().sum()
    }

    /// Lowest-addressed extent of `len` bytes, or `None` when nothing fits.
    pub fn allocate(&mut self, len: u64) -> Option<u64> {
        if len == 0 {
            return None;
        }
        let (&start, &extent) = self.free.iter().find(|(_, &l)| l >= len)?;
        self.free.remove(&start);
        if extent > len {
            self.free.insert(start + len, extent - len);
        }
        Some(start)
    }

    /// Returns `[start, start+len)` to the pool, merging with neighbours.
    ///
    /// Panics if the range overlaps free space, which would mean a double
    /// release by the caller.
    pub fn release(&mut self, start: u64, len: u64) {
        assert!(len > 0 && start >= self.base && start + len <= self.base + self.span);
        let mut start = start;
        let mut len = len;
        if let Some((&prev, &plen)) = self.free.range(..start).next_back() {
            assert!(prev + plen <= start, "release overlaps free extent");
            if prev + plen == start {
                self.free.remove(&prev);
                start = prev;
                len += plen;
            }
        }
        if let Some((&next, &nlen)) = self.free.range(start..).next() {
            assert!(start + len <= next, "release overlaps free extent");
            if start + len == next {
                self.free.remove(&next);
                len += nlen;
            }
        }
        self.free.insert(start, len);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_fit_reuses_lowest_hole() {
        let mut a = AddressSpace::new(0x1000, 0x10000);
        let x = a.allocate(0x1000).unwrap();
        let y = a.allocate(0x2000).unwrap();
        let z = a.allocate(0x1000).unwrap();
        assert_eq!((x, y, z), (0x1000, 0x2000, 0x4000));
        a.release(y, 0x2000);
        assert_eq!(a.allocate(0x1000), Some(0x2000));
        assert_eq!(a.allocate(0x1000), Some(0x3000));
        a.release(x, 0x1000);
        a.release(0x2000, 0x1000);
        a.release(0x3000, 0x1000);
        a.release(z, 0x1000);
        assert_eq!(a.free_bytes(), 0x10000);
        assert_eq!(a.free.len(), 1);
    }

    #[test]
    fn exhaustion_returns_none() {
        let mut a = AddressSpace::new(0, 0x3000);
        assert!(a.allocate(0x4000).is_none());
        assert!(a.allocate(0).is_none());
        a.allocate(0x3000).unwrap();
        assert!(a.allocate(0x1000).is_none());
    }

    proptest! {
        // Interval oracle: live extents never overlap and the free map stays
        // consistent with what has been handed out.
        #[test]
        fn live_extents_disjoint(ops in proptest::collection::vec((any::<bool>(), 1u64..16, any::<prop::sample::Index>()), 1..400)) {
            let page = 0x1000;
            let mut a = AddressSpace::new(0x10_0000, 256 * page);
            let mut live: Vec<(u64, u64)> = Vec::new();
            for (alloc, pages, idx) in ops {
                if alloc || live.is_empty() {
                    if let Some(s) = a.allocate(pages * page) {
                        live.push((s, pages * page));
                    }
                } else {
                    let (s, l) = live.swap_remove(idx.index(live.len()));
                    a.release(s, l);
                }
                let mut sorted = live.clone();
                sorted.sort();
                for w in sorted.windows(2) {
                    prop_assert!(w[0].0 + w[0].1 <= w[1].0);
                }
                let used: u64 = live.iter().map(|x| x.1).sum();
                prop_assert_eq!(used + a.free_bytes(), 256 * page);
            }
        }
    }
}
