//! Scopes: page-aligned sub-heaps with a bump allocator.
//!
//! A scope is the unit that gets sealed and sandboxed. Its first 64 bytes
//! hold `magic "SCP1"`, pad, id, length and the bump cursor.

use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};

use super::{HeapError, SharedHeap, ShmAlloc};

pub const HEADER_SIZE: u64 = 64;
pub const MAGIC: [u8; 4] = *b"SCP1";

#[repr(C)]
struct ScopeHeader {
    magic: [u8; 4],
    _pad: u32,
    id: u64,
    len: u64,
    cursor: AtomicU64,
    _reserved: [u64; 4],
}

const _: () = assert!(std::mem::size_of::<ScopeHeader>() == HEADER_SIZE as usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScopeState {
    Active,
    Sealed,
    Destroyed,
}

/// # Safety
/// `start` must be the first byte of a writable scope run of `len` bytes.
pub(super) unsafe fn init_header(start: u64, id: u64, len: u64) {
    let h = start as *mut ScopeHeader;
    std::ptr::write(
        h,
        ScopeHeader {
            magic: MAGIC,
            _pad: 0,
            id,
            len,
            cursor: AtomicU64::new(HEADER_SIZE),
            _reserved: [0; 4],
        },
    );
}

pub struct Scope {
    heap: SharedHeap,
    start: u64,
    len: u64,
    id: u64,
    state: AtomicU8,
}

impl Scope {
    pub(super) fn new(heap: SharedHeap, start: u64, len: u64, id: u64) -> Self {
        Self {
            heap,
            start,
            len,
            id,
            state: AtomicU8::new(0),
        }
    }

    /// Re-wraps a scope created elsewhere (e.g. by the peer process).
    ///
    /// # Safety
    /// `start` must be the header of a live scope in `heap`.
    pub unsafe fn from_raw(heap: SharedHeap, start: u64) -> Result<Self, HeapError> {
        let h = &*(start as *const ScopeHeader);
        if h.magic != MAGIC {
            return Err(HeapError::InvalidFree(start));
        }
        Ok(Self::new(heap, start, h.len, h.id))
    }

    pub fn heap(&self) -> &SharedHeap {
        &self.heap
    }

    pub fn start(&self) -> u64 {
        self.start
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.used() == 0
    }

    pub fn end(&self) -> u64 {
        self.start + self.len
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn pages(&self) -> u64 {
        self.len / super::PAGE
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.start && addr < self.end()
    }

    pub fn state(&self) -> ScopeState {
        match self.state.load(Ordering::Acquire) {
            0 => ScopeState::Active,
            1 => ScopeState::Sealed,
            _ => ScopeState::Destroyed,
        }
    }

    pub(crate) fn set_state(&self, s: ScopeState) {
        let v = match s {
            ScopeState::Active => 0,
            ScopeState::Sealed => 1,
            ScopeState::Destroyed => 2,
        };
        self.state.store(v, Ordering::Release);
    }

    fn header(&self) -> &ScopeHeader {
        // SAFETY: the header lives at `start` while the scope exists.
        unsafe { &*(self.start as *const ScopeHeader) }
    }

    /// Bytes handed out so far, excluding the header.
    pub fn used(&self) -> u64 {
        crate::runtime::fault::ensure_thread_access();
        self.header().cursor.load(Ordering::Acquire) - HEADER_SIZE
    }

    pub fn remaining(&self) -> u64 {
        crate::runtime::fault::ensure_thread_access();
        self.len - self.header().cursor.load(Ordering::Acquire)
    }

    fn check_active(&self) -> Result<(), HeapError> {
        match self.state() {
            ScopeState::Active => Ok(()),
            s => Err(HeapError::ScopeState(s)),
        }
    }

    pub fn alloc(&self, size: u64, align: u64) -> Result<u64, HeapError> {
        if !align.is_power_of_two() {
            return Err(HeapError::BadAlignment(align));
        }
        self.check_active()?;
        crate::runtime::fault::ensure_thread_access();
        let align = align.max(16);
        let cursor = &self.header().cursor;
        let mut cur = cursor.load(Ordering::Acquire);
        loop {
            let at = (self.start + cur).next_multiple_of(align) - self.start;
            let end = at.checked_add(size).filter(|&e| e <= self.len).ok_or(
                HeapError::ScopeFull {
                    requested: size,
                    remaining: self.len - cur,
                },
            )?;
            match cursor.compare_exchange_weak(cur, end, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => return Ok(self.start + at),
                Err(c) => cur = c,
            }
        }
    }

    /// Forgets every object in the scope.
    pub fn reset(&self) -> Result<(), HeapError> {
        self.check_active()?;
        crate::runtime::fault::ensure_thread_access();
        self.header().cursor.store(HEADER_SIZE, Ordering::Release);
        Ok(())
    }

    /// Returns the scope's pages to the heap.
    pub fn destroy(&self) -> Result<(), HeapError> {
        self.check_active()?;
        self.heap.destroy_scope_pages(self.start)?;
        self.set_state(ScopeState::Destroyed);
        Ok(())
    }
}

impl ShmAlloc for Scope {
    fn alloc_bytes(&self, size: u64, align: u64) -> Result<u64, HeapError> {
        self.alloc(size, align)
    }

    /// Scope memory is reclaimed only as a whole.
    fn free_bytes(&self, _addr: u64) -> Result<(), HeapError> {
        Ok(())
    }
}

impl std::fmt::Debug for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scope")
            .field("id", &self.id)
            .field("start", &format_args!("{:#x}", self.start))
            .field("len", &self.len)
            .field("state", &self.state())
            .finish()
    }
}
