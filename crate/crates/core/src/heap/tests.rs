use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;
use crate::runtime::scratch_heap;

/// Formatted scratch heap for tests.
pub(crate) fn scratch(size: u64) -> SharedHeap {
    let dir = std::env::temp_dir().join("rpcool-unit");
    SharedHeap::format(scratch_heap(&dir, size).unwrap()).unwrap()
}

/// Live allocations as start -> end; checks every new one is disjoint.
#[derive(Default)]
struct Intervals(BTreeMap<u64, u64>);

impl Intervals {
    fn insert(&mut self, lo: u64, hi: u64) -> Result<(), String> {
        if let Some((&a, &b)) = self.0.range(..hi).next_back() {
            if b > lo {
                return Err(format!("{lo:#x}..{hi:#x} overlaps {a:#x}..{b:#x}"));
            }
        }
        self.0.insert(lo, hi);
        Ok(())
    }

    fn remove(&mut self, lo: u64) -> bool {
        self.0.remove(&lo).is_some()
    }
}

#[test]
fn format_then_open() {
    let h = scratch(1 << 20);
    let again = SharedHeap::open(h.mapping().clone()).unwrap();
    assert_eq!(again.size(), 1 << 20);
    let s = h.stats();
    assert_eq!(s.page_count, 256);
    assert_eq!(s.free_pages + s.meta_pages, 256);
}

#[test]
fn small_and_large_allocations() {
    let h = scratch(1 << 20);
    let a = h.alloc(24, 8).unwrap();
    let b = h.alloc(24, 8).unwrap();
    assert_ne!(a, b);
    assert_eq!(h.allocation_size(a), Some(32));
    let big = h.alloc(3 * PAGE + 1, 8).unwrap();
    assert_eq!(big % PAGE, 0);
    assert_eq!(h.allocation_size(big), Some(4 * PAGE));
    h.free(a).unwrap();
    h.free(big).unwrap();
    assert!(matches!(h.free(big), Err(HeapError::DoubleFree(_))));
    assert!(matches!(h.free(a), Err(HeapError::DoubleFree(_))));
    h.free(b).unwrap();
    assert_eq!(h.stats().live_allocations, 0);
}

#[test]
fn alignment_is_honoured() {
    let h = scratch(1 << 20);
    for align in [1, 2, 8, 64, 512, 4096] {
        let a = h.alloc(40, align).unwrap();
        assert_eq!(a % align, 0, "align {align}");
    }
    assert!(matches!(h.alloc(8, 3), Err(HeapError::BadAlignment(3))));
    assert!(matches!(h.alloc(8, 8192), Err(HeapError::BadAlignment(_))));
}

#[test]
fn exhaustion_is_an_error() {
    let h = scratch(64 * PAGE);
    let mut got = Vec::new();
    while let Ok(a) = h.alloc(PAGE, 8) {
        got.push(a);
    }
    assert!(matches!(h.alloc(PAGE, 8), Err(HeapError::OutOfMemory { .. })));
    for a in got {
        h.free(a).unwrap();
    }
    assert!(h.alloc(PAGE, 8).is_ok());
}

#[test]
fn invalid_free_is_rejected() {
    let h = scratch(1 << 20);
    assert!(matches!(h.free(h.base()), Err(HeapError::InvalidFree(_))));
    let big = h.alloc(2 * PAGE, 8).unwrap();
    assert!(matches!(h.free(big + PAGE), Err(HeapError::InvalidFree(_))));
    let small = h.alloc(16, 8).unwrap();
    assert!(h.free(small + 1).is_err());
}

#[test]
fn roots_round_trip() {
    let h = scratch(1 << 20);
    h.set_root(3, 0xdead).unwrap();
    assert_eq!(h.root(3).unwrap(), 0xdead);
    assert!(h.set_root(ROOT_SLOTS, 1).is_err());
}

#[test]
fn scopes_bump_and_stay_inside() {
    let h = scratch(1 << 20);
    let s = h.create_scope(8000).unwrap();
    assert_eq!(s.start() % PAGE, 0);
    assert_eq!(s.len() % PAGE, 0);
    let mut last = 0;
    loop {
        match s.alloc(100, 8) {
            Ok(a) => {
                assert!(a >= s.start() + scope::HEADER_SIZE && a + 100 <= s.end());
                assert!(a > last);
                last = a;
            }
            Err(HeapError::ScopeFull { .. }) => break,
            Err(e) => panic!("{e}"),
        }
    }
    s.reset().unwrap();
    assert_eq!(s.used(), 0);
    s.destroy().unwrap();
    assert!(s.alloc(8, 8).is_err());
    assert_eq!(h.stats().scopes, 0);
}

#[test]
fn scope_reopens_from_raw() {
    let h = scratch(1 << 20);
    let s = h.create_scope(100).unwrap();
    let a = s.alloc(10, 8).unwrap();
    let again = unsafe { Scope::from_raw(h.clone(), s.start()) }.unwrap();
    assert_eq!(again.id(), s.id());
    assert_eq!(again.used(), s.used());
    assert!(again.contains(a));
    assert!(unsafe { Scope::from_raw(h.clone(), h.alloc(PAGE, 8).unwrap()) }.is_err());
}

#[test]
fn scopes_from_one_run_are_adjacent() {
    let h = scratch(1 << 20);
    let v = h.create_scopes(4, PAGE).unwrap();
    for w in v.windows(2) {
        assert_eq!(w[0].end(), w[1].start());
        assert_ne!(w[0].id(), w[1].id());
    }
}

#[test]
fn containers() {
    let h = scratch(1 << 20);
    let mut v = ShmVec::<u64>::new_in(&h).unwrap();
    for i in 0..100 {
        v.push(&h, i * 3).unwrap();
    }
    assert_eq!(v.len(), 100);
    assert_eq!(v.get(10), Some(30));
    assert!(v.set(10, 7));
    let again = ShmVec::<u64>::from_ptr(v.as_ptr());
    assert_eq!(again.get(10), Some(7));
    assert_eq!(again.to_vec().len(), 100);
    let b = ShmBytes::from_slice_in(&h, b"hello").unwrap();
    assert_eq!(b.to_string_lossy(), "hello");
    v.free(&h).unwrap();
    b.free(&h).unwrap();
    assert_eq!(h.stats().live_allocations, 0);
}

#[derive(Debug, Clone)]
enum Op {
    Alloc(u64, u32),
    Free(usize),
    Scope(u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        6 => (1u64..9000, 0u32..7).prop_map(|(s, a)| Op::Alloc(s, a)),
        5 => any::<usize>().prop_map(Op::Free),
        1 => (1u64..3 * PAGE).prop_map(Op::Scope),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn allocations_never_overlap(ops in prop::collection::vec(op(), 1..400)) {
        let h = scratch(4 << 20);
        let mut live = Intervals::default();
        let mut order: Vec<u64> = Vec::new();
        for o in ops {
            match o {
                Op::Alloc(size, a) => {
                    let align = 1u64 << (a * 2);
                    if let Ok(addr) = h.alloc(size, align) {
                        prop_assert_eq!(addr % align, 0);
                        let real = h.allocation_size(addr).unwrap();
                        prop_assert!(real >= size);
                        live.insert(addr, addr + real).map_err(TestCaseError::fail)?;
                        order.push(addr);
                    }
                }
                Op::Free(i) if !order.is_empty() => {
                    let addr = order.swap_remove(i % order.len());
                    h.free(addr).unwrap();
                    prop_assert!(live.remove(addr));
                    prop_assert!(h.free(addr).is_err());
                }
                Op::Free(_) => {}
                Op::Scope(size) => {
                    if let Ok(s) = h.create_scope(size) {
                        live.insert(s.start(), s.end()).map_err(TestCaseError::fail)?;
                        while let Ok(a) = s.alloc(size / 4 + 1, 16) {
                            prop_assert!(a >= s.start() && a + size / 4 + 1 <= s.end());
                        }
                        s.destroy().unwrap();
                        live.remove(s.start());
                    }
                }
            }
        }
        prop_assert_eq!(h.stats().live_allocations, order.len() as u64);
    }
}
