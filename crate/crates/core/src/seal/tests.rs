use std::ptr;
use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::heap::tests::scratch;
use crate::runtime::catch;

fn rings(heap: &SharedHeap, cap: u32) -> (SealRing, SealRing) {
    let tx = SealRing::create(heap, cap).unwrap();
    let rx = SealRing::open(heap.mapping().clone(), tx.addr(), cap, Role::Receiver).unwrap();
    (tx, rx)
}

fn try_store(addr: u64, v: u8) -> bool {
    catch(|| unsafe { ptr::write_volatile(addr as *mut u8, v) }).is_ok()
}

fn read(addr: u64) -> u8 {
    unsafe { ptr::read_volatile(addr as *const u8) }
}

#[test]
fn sealed_pages_reject_stores_until_release() {
    let h = scratch(8 << 20);
    let (tx, rx) = rings(&h, 64);
    for pages in [1u64, 2, 16] {
        let a = h.alloc(pages * PAGE, PAGE).unwrap();
        let t = tx.seal(a, pages * PAGE).unwrap();
        for p in 0..pages {
            for off in [0, 1, PAGE / 2, PAGE - 1] {
                let at = a + p * PAGE + off;
                assert!(!try_store(at, 0x77), "store at page {p} took effect");
                assert_eq!(read(at), 0);
            }
        }
        assert!(matches!(tx.release(t), Err(SealError::WrongState { .. })));
        assert!(!try_store(a, 1));
        rx.mark_complete(t).unwrap();
        tx.release(t).unwrap();
        assert!(try_store(a, 1));
        assert_eq!(read(a), 1);
    }
}

#[test]
fn range_errors() {
    let h = scratch(1 << 20);
    let (tx, _rx) = rings(&h, 8);
    let a = h.alloc(4 * PAGE, PAGE).unwrap();
    assert!(matches!(tx.seal(a, 0), Err(SealError::Empty)));
    assert!(matches!(tx.seal(a + 1, PAGE), Err(SealError::Unaligned { .. })));
    assert!(matches!(tx.seal(h.base() + h.size(), PAGE), Err(SealError::OutOfHeap { .. })));
    let t = tx.seal(a, 2 * PAGE).unwrap();
    assert!(matches!(tx.seal(a + PAGE, 2 * PAGE), Err(SealError::Overlap(i)) if i == t.index));
    let u = tx.seal(a + 2 * PAGE, 2 * PAGE).unwrap();
    assert_ne!(t.index, u.index);
    assert_eq!(tx.active(), 2);
    assert_eq!(tx.mapping().active_seals(), 2);
}

#[test]
fn verification() {
    let h = scratch(1 << 20);
    let (tx, rx) = rings(&h, 2);
    let a = h.alloc(4 * PAGE, PAGE).unwrap();
    let t = tx.seal(a, 2 * PAGE).unwrap();
    assert!(rx.is_sealed(t, a, 2 * PAGE));
    assert!(rx.is_sealed(t, a + PAGE, 100));
    assert!(!rx.is_sealed(t, a, 3 * PAGE));
    assert!(!rx.is_sealed(t, a - PAGE, PAGE));
    assert!(!rx.is_sealed(SealToken { index: t.index, epoch: t.epoch + 1 }, a, PAGE));
    assert!(!rx.is_sealed(SealToken { index: 99, epoch: t.epoch }, a, PAGE));
    rx.mark_complete(t).unwrap();
    assert!(!rx.is_sealed(t, a, PAGE));
    tx.release(t).unwrap();
    // Slot reuse bumps the epoch, so the old token stays dead.
    let t1 = tx.seal(a, PAGE).unwrap();
    let t2 = tx.seal(a + PAGE, PAGE).unwrap();
    let reused = if t1.index == t.index { t1 } else { t2 };
    assert!(reused.epoch > t.epoch);
    assert!(!rx.is_sealed(t, a, PAGE));
}

#[test]
fn role_and_state_gates() {
    let h = scratch(1 << 20);
    let (tx, rx) = rings(&h, 8);
    let a = h.alloc(PAGE, PAGE).unwrap();
    let t = tx.seal(a, PAGE).unwrap();
    assert!(matches!(tx.mark_complete(t), Err(SealError::WrongRole(_))));
    assert!(matches!(rx.seal(a, PAGE), Err(SealError::WrongRole(_))));
    assert!(matches!(rx.release(t), Err(SealError::WrongRole(_))));
    rx.mark_complete(t).unwrap();
    assert!(matches!(rx.mark_complete(t), Err(SealError::WrongState { .. })));
    tx.release(t).unwrap();
    assert!(tx.release(t).is_err());
    assert_eq!(tx.mapping().active_seals(), 0);
}

#[test]
fn sender_cannot_forge_completion() {
    let h = scratch(1 << 20);
    let (tx, _rx) = rings(&h, 8);
    let a = h.alloc(PAGE, PAGE).unwrap();
    let t = tx.seal(a, PAGE).unwrap();
    let state = tx.addr() + t.index as u64 * DESCRIPTOR_SIZE + 16;
    assert!(!try_store(state, STATE_COMPLETED));
    assert!(tx.release(t).is_err());
}

#[test]
fn ring_full() {
    let h = scratch(1 << 20);
    let (tx, rx) = rings(&h, 2);
    let a = h.alloc(3 * PAGE, PAGE).unwrap();
    let t0 = tx.seal(a, PAGE).unwrap();
    tx.seal(a + PAGE, PAGE).unwrap();
    assert!(matches!(tx.seal(a + 2 * PAGE, PAGE), Err(SealError::RingFull)));
    rx.mark_complete(t0).unwrap();
    tx.release(t0).unwrap();
    tx.seal(a + 2 * PAGE, PAGE).unwrap();
}

#[test]
fn large_seal_randomized_probes() {
    use rand::{Rng, SeedableRng};
    let h = scratch(8 << 20);
    let (tx, rx) = rings(&h, 8);
    let a = h.alloc(1024 * PAGE, PAGE).unwrap();
    let t = tx.seal(a, 1024 * PAGE).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for _ in 0..2000 {
        let at = a + rng.gen_range(0..1024 * PAGE);
        assert!(!try_store(at, 9));
    }
    rx.mark_complete(t).unwrap();
    tx.release(t).unwrap();
    assert!(try_store(a + 1023 * PAGE, 9));
}

#[test]
fn pool_batches_at_threshold() {
    let h = scratch(16 << 20);
    let (tx, rx) = rings(&h, 2048);
    let tx = Arc::new(tx);
    let mut pool = ScopePool::new(&h, tx.clone(), 1100, 100, 1024).unwrap();
    let mut released = 0;
    for _ in 0..1023 {
        let s = pool.take().unwrap();
        let t = pool.seal(&s).unwrap();
        rx.mark_complete(t).unwrap();
        released += pool.retire(s, t);
    }
    assert_eq!(released, 0);
    assert_eq!(pool.pending(), 1023);
    assert_eq!(tx.active(), 1023);
    assert_eq!(pool.flush(), 1023);
    assert_eq!(tx.active(), 0);
    assert_eq!(pool.available(), 1100);
    assert_eq!(pool.flush(), 0);

    // An incomplete seal is skipped and stays pending.
    let s1 = pool.take().unwrap();
    let s2 = pool.take().unwrap();
    let (a1, a2) = (s1.start(), s2.start());
    let t1 = pool.seal(&s1).unwrap();
    let t2 = pool.seal(&s2).unwrap();
    rx.mark_complete(t2).unwrap();
    pool.retire(s1, t1);
    pool.retire(s2, t2);
    assert_eq!(pool.flush(), 1);
    assert_eq!(pool.pending(), 1);
    assert!(!try_store(a1 + 200, 1));
    assert!(try_store(a2 + 200, 1));
}

#[test]
fn pool_auto_flush() {
    let h = scratch(8 << 20);
    let (tx, rx) = rings(&h, 64);
    let mut pool = ScopePool::new(&h, Arc::new(tx), 8, 100, 4).unwrap();
    let mut released = Vec::new();
    for _ in 0..8 {
        let s = pool.take().unwrap();
        let t = pool.seal(&s).unwrap();
        rx.mark_complete(t).unwrap();
        released.push(pool.retire(s, t));
    }
    assert_eq!(released, [0, 0, 0, 4, 0, 0, 0, 4]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Releasing one at a time and in a batch end in the same page and
    /// descriptor states.
    #[test]
    fn batch_equals_single(complete in prop::collection::vec(any::<bool>(), 1..24)) {
        let h = scratch(4 << 20);
        let n = complete.len() as u64;
        let mut ends = Vec::new();
        for batch in [false, true] {
            let (tx, rx) = rings(&h, 64);
            let a = h.alloc(n * PAGE, PAGE).unwrap();
            let toks: Vec<_> = (0..n).map(|i| tx.seal(a + i * PAGE, PAGE).unwrap()).collect();
            for (t, &c) in toks.iter().zip(&complete) {
                if c {
                    rx.mark_complete(*t).unwrap();
                }
            }
            let res: Vec<bool> = if batch {
                tx.release_batch(&toks).into_iter().map(|r| r.is_ok()).collect()
            } else {
                toks.iter().map(|t| tx.release(*t).is_ok()).collect()
            };
            let writable: Vec<bool> = (0..n).map(|i| try_store(a + i * PAGE, 1)).collect();
            let states: Vec<_> = toks.iter().map(|t| tx.state(*t)).collect();
            prop_assert_eq!(&res, &complete);
            prop_assert_eq!(&writable, &complete);
            ends.push((res, writable, states));
            drop(rx);
            drop(tx);
        }
        prop_assert_eq!(&ends[0], &ends[1]);
    }
}
