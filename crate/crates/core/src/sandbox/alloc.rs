//! Temporary allocation arenas for sandboxed threads.
//!
//! Each key slot owns a fixed reservation. While a thread is sandboxed,
//! [`SandboxAlloc`] serves every allocation from its slot's arena; on exit the
//! arena is dropped back to inaccessible, zero-filled pages, so anything the
//! handler allocated is gone.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::runtime::sys;

/// Reservation per slot.
pub(crate) const ARENA_SPAN: u64 = 256 << 20;
const COMMIT_STEP: u64 = 64 << 10;

static ARENA_LO: AtomicU64 = AtomicU64::new(0);
static ARENA_HI: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static CURRENT: Cell<*const Arena> = const { Cell::new(std::ptr::null()) };
}

pub(crate) struct Arena {
    base: u64,
    first_commit: u64,
    cursor: AtomicU64,
    committed: AtomicU64,
}

impl Arena {
    pub(crate) fn new(base: u64, first_commit: u64) -> Self {
        Self {
            base,
            first_commit: first_commit.next_multiple_of(COMMIT_STEP).min(ARENA_SPAN),
            cursor: AtomicU64::new(0),
            committed: AtomicU64::new(0),
        }
    }

    pub(crate) fn range(&self) -> (u64, u64) {
        (self.base, self.base + ARENA_SPAN)
    }

    /// Bump allocation; only the slot's current owner calls this.
    pub(crate) fn alloc(&self, size: usize, align: usize) -> *mut u8 {
        let cur = self.cursor.load(Ordering::Relaxed);
        let at = (self.base + cur).next_multiple_of(align.max(1) as u64) - self.base;
        let Some(end) = at.checked_add(size.max(1) as u64).filter(|&e| e <= ARENA_SPAN) else {
            return std::ptr::null_mut();
        };
        let committed = self.committed.load(Ordering::Relaxed);
        if end > committed {
            let want = end
                .next_multiple_of(COMMIT_STEP)
                .max(committed + self.first_commit)
                .min(ARENA_SPAN);
            // SAFETY: inside this arena's reservation. mprotect keeps the
            // reservation's protection key.
            if unsafe { sys::mprotect(self.base + committed, (want - committed) as usize, sys::PROT_RW) }
                .is_err()
            {
                return std::ptr::null_mut();
            }
            self.committed.store(want, Ordering::Relaxed);
        }
        self.cursor.store(end, Ordering::Relaxed);
        (self.base + at) as *mut u8
    }

    pub(crate) fn used(&self) -> u64 {
        self.cursor.load(Ordering::Relaxed)
    }

    /// Discards everything: pages become inaccessible and read back as zero
    /// once recommitted.
    pub(crate) fn reset(&self) {
        let committed = self.committed.swap(0, Ordering::Relaxed);
        self.cursor.store(0, Ordering::Relaxed);
        if committed == 0 {
            return;
        }
        // SAFETY: inside this arena's reservation.
        unsafe {
            let _ = sys::mprotect(self.base, committed as usize, sys::PROT_NONE);
            libc::madvise(self.base as *mut libc::c_void, committed as usize, libc::MADV_DONTNEED);
        }
    }
}

/// Reserves `slots` arenas in one inaccessible block.
pub(crate) fn reserve(slots: usize) -> std::io::Result<u64> {
    let len = slots as u64 * ARENA_SPAN;
    let p = sys::mmap_any(
        len as usize,
        sys::PROT_NONE,
        libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
        -1,
    )?;
    ARENA_LO.store(p as u64, Ordering::SeqCst);
    ARENA_HI.store(p as u64 + len, Ordering::SeqCst);
    Ok(p as u64)
}

pub(crate) fn set_current(a: *const Arena) {
    CURRENT.with(|c| c.set(a));
}

fn in_arena(p: *mut u8) -> bool {
    let p = p as u64;
    p >= ARENA_LO.load(Ordering::Relaxed) && p < ARENA_HI.load(Ordering::Relaxed)
}

/// Global allocator that redirects allocations made inside a sandbox to the
/// sandbox's temporary arena and forwards everything else to [`System`].
///
/// ```ignore
/// #[global_allocator]
/// static ALLOC: rpcool::sandbox::SandboxAlloc = rpcool::sandbox::SandboxAlloc;
/// ```
///
/// Without it sandboxed code still runs, but its allocations come from the
/// ordinary heap and survive the sandbox.
pub struct SandboxAlloc;

unsafe impl GlobalAlloc for SandboxAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let a = CURRENT.with(|c| c.get());
        if !a.is_null() {
            return (*a).alloc(layout.size(), layout.align());
        }
        System.alloc(layout)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        let a = CURRENT.with(|c| c.get());
        if !a.is_null() {
            // Arena memory is never reused within a sandbox and is zeroed on
            // reset.
            return (*a).alloc(layout.size(), layout.align());
        }
        System.alloc_zeroed(layout)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        if in_arena(ptr) {
            return;
        }
        System.dealloc(ptr, layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        // Blocks that predate the sandbox stay in the ordinary heap, so
        // growing one from inside does not leave it pointing into the arena.
        if !in_arena(ptr) {
            return System.realloc(ptr, layout, new_size);
        }
        let new = self.alloc(Layout::from_size_align_unchecked(new_size, layout.align()));
        if !new.is_null() {
            std::ptr::copy_nonoverlapping(ptr, new, layout.size().min(new_size));
        }
        new
    }
}
