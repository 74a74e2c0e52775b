use std::ptr;

use super::*;
use crate::heap::tests::scratch;
use crate::heap::PAGE;

fn read(addr: u64) -> u8 {
    // SAFETY: tests probe addresses on purpose; faults are caught.
    unsafe { ptr::read_volatile(addr as *const u8) }
}

#[test]
fn reads_inside_the_range() {
    let h = scratch(1 << 20);
    let s = h.create_scope(100).unwrap();
    let a = s.alloc(8, 8).unwrap();
    unsafe { ptr::write(a as *mut u64, 99) };
    let got = run(s.start(), s.len(), &[], |_| unsafe { ptr::read_volatile(a as *const u64) }).unwrap();
    assert_eq!(got, 99);
}

#[test]
fn probes_outside_the_range_are_violations() {
    let h = scratch(1 << 20);
    let s = h.create_scopes(2, PAGE).unwrap();
    let mut secret = PrivateRegion::new(PAGE as usize).unwrap();
    secret.as_mut_slice().fill(0xA5);
    let probes = [
        s[1].start(),
        h.base(),
        secret.addr(),
        8,
        0xdead_0000_0000,
    ];
    for p in probes {
        let e = run(s[0].start(), s[0].len(), &[], |_| read(p)).unwrap_err();
        assert!(e.is_violation(), "{p:#x}: {e}");
    }
    // Everything is accessible again afterwards.
    assert_eq!(read(s[1].start() + 100), 0);
    assert_eq!(secret.as_slice()[7], 0xA5);
}

#[test]
fn writes_outside_are_violations_and_take_no_effect() {
    let h = scratch(1 << 20);
    let s = h.create_scopes(2, PAGE).unwrap();
    let target = s[1].start() + 512;
    let e = run(s[0].start(), s[0].len(), &[], |_| unsafe { ptr::write_volatile(target as *mut u8, 1) })
        .unwrap_err();
    assert!(e.is_violation());
    assert_eq!(read(target), 0);
}

#[test]
fn errors_for_bad_ranges_and_misuse() {
    let h = scratch(1 << 20);
    let s = h.create_scope(100).unwrap();
    assert!(matches!(Sandbox::begin(s.start() + 8, PAGE, &[]), Err(SandboxError::Unaligned { .. })));
    assert!(matches!(Sandbox::begin(0x1000, PAGE, &[]), Err(SandboxError::NotInHeap { .. })));
    let mut sb = Sandbox::begin(s.start(), s.len(), &[]).unwrap();
    assert!(matches!(Sandbox::begin(s.start(), s.len(), &[]), Err(SandboxError::Nested)));
    sb.end().unwrap();
    assert!(matches!(sb.end(), Err(SandboxError::NotActive)));
    assert!(matches!(sb.run(|_| 1), Err(SandboxError::NotActive)));
}

#[test]
fn copy_in_variables() {
    let h = scratch(1 << 20);
    let s = h.create_scope(100).unwrap();
    let mut private = PrivateRegion::new(64).unwrap();
    private.as_mut_slice()[..8].copy_from_slice(&42u64.to_le_bytes());
    let val = u64::from_le_bytes(private.as_slice()[..8].try_into().unwrap());
    let (a, b) = run(s.start(), s.len(), &[&val.to_le_bytes(), b"abc"], |sb| {
        (sb.var_as::<u64>(0).unwrap(), sb.var(1).unwrap()[2])
    })
    .unwrap();
    assert_eq!((a, b), (42, b'c'));
}

#[test]
fn arena_is_discarded_and_zeroed() {
    let h = scratch(1 << 20);
    let s = h.create_scope(100).unwrap();
    let p = run(s.start(), s.len(), &[], |_| {
        let mut v = vec![0x5Au8; 1024];
        v[1] = 1;
        let p = v.as_ptr() as u64;
        std::mem::forget(v);
        p
    })
    .unwrap();
    assert!(crate::runtime::catch(|| read(p)).is_err(), "arena survived the sandbox");
    let (first, used) = run(s.start(), s.len(), &[], |sb| {
        let v = vec![0u8; 1024];
        let q = sb.alloc(1024, 16).unwrap();
        let z = unsafe { std::slice::from_raw_parts(q, 1024) }.iter().all(|&b| b == 0);
        (z && v.iter().all(|&b| b == 0), sb.arena_used())
    })
    .unwrap();
    assert!(first);
    assert!(used >= 2048);
}

#[test]
fn cached_entry_hits() {
    let h = scratch(1 << 20);
    let s = h.create_scope(100).unwrap();
    run(s.start(), s.len(), &[], |_| ()).unwrap();
    let before = info();
    for _ in 0..10 {
        run(s.start(), s.len(), &[], |_| ()).unwrap();
    }
    let after = info();
    // Other tests share the cache, so only insist on hits here.
    assert!(after.hits >= before.hits + 1);
}

#[test]
fn threads_are_independent() {
    let h = scratch(1 << 20);
    let s = h.create_scopes(2, PAGE).unwrap();
    let ranges: Vec<(u64, u64)> = s.iter().map(|s| (s.start(), s.len())).collect();
    if info().mode == Mode::Portable {
        return;
    }
    let barrier = std::sync::Arc::new(std::sync::Barrier::new(2));
    let hs: Vec<_> = (0..2)
        .map(|i| {
            let (mine, other) = (ranges[i], ranges[1 - i]);
            let b = barrier.clone();
            std::thread::spawn(move || {
                let sb = Sandbox::begin(mine.0, mine.1, &[]).unwrap();
                b.wait();
                let own = sb.run(|_| read(mine.0 + 70)).is_ok();
                let foreign = sb.run(|_| read(other.0 + 70)).unwrap_err().is_violation();
                b.wait();
                (own, foreign)
            })
        })
        .collect();
    for t in hs {
        assert_eq!(t.join().unwrap(), (true, true));
    }
}

#[test]
fn flush_forces_slow_path() {
    let h = scratch(1 << 20);
    let s = h.create_scope(100).unwrap();
    run(s.start(), s.len(), &[], |_| ()).unwrap();
    flush_cache();
    let before = info().misses;
    run(s.start(), s.len(), &[], |_| ()).unwrap();
    assert!(info().misses > before);
}
