//! Allocator for fixed-address shared heaps.
//!
//! All allocator state lives inside the heap so any process that maps it can
//! allocate and free. Layout (little-endian, 4096-byte pages):
//!
//! ```text
//! page 0        header: magic "RPCOOLH1", version, page size, heap size,
//!               lock, flags, live allocation count, page count, metadata
//!               page count, scope count, next scope id, search hint,
//!               slab list heads [u32; 8] at 80, root slots [u64; 16] at 128
//! page 1..      page descriptors, 48 bytes each: kind|value, next, used,
//!               pad, occupancy bitmap [u64; 4]
//! rest          slabs (16..2048 byte size classes), page runs and scopes
//! ```
//!
//! The descriptor table doubles as the scope directory: a scope is a page run
//! tagged `SCOPE_HEAD`.

mod containers;
mod scope;

pub use containers::{ShmBytes, ShmVec};
pub use scope::{Scope, ScopeState};

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use crate::runtime::HeapMapping;

pub const MAGIC: [u8; 8] = *b"RPCOOLH1";
pub const VERSION: u32 = 1;
pub const PAGE: u64 = 4096;
pub const ROOT_SLOTS: usize = 16;
pub const SIZE_CLASSES: [u32; 8] = [16, 32, 64, 128, 256, 512, 1024, 2048];
pub const MAX_SLAB_OBJECT: u64 = 2048;
const DESC_TABLE: u64 = PAGE;
const DESC_SIZE: u64 = 48;

const KIND_SHIFT: u32 = 28;
const VALUE_MASK: u32 = (1 << KIND_SHIFT) - 1;

/// What a page is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageKind {
    Free,
    Meta,
    /// Slab page of the given size-class index.
    Slab(u32),
    /// First page of an `n`-page run.
    RunHead(u32),
    RunTail,
    /// First page of an `n`-page scope.
    ScopeHead(u32),
    ScopeTail,
}

impl PageKind {
    fn encode(self) -> u32 {
        let (k, v) = match self {
            PageKind::Free => (0, 0),
            PageKind::Meta => (1, 0),
            PageKind::Slab(c) => (2, c),
            PageKind::RunHead(n) => (3, n),
            PageKind::RunTail => (4, 0),
            PageKind::ScopeHead(n) => (5, n),
            PageKind::ScopeTail => (6, 0),
        };
        (k << KIND_SHIFT) | (v & VALUE_MASK)
    }

    fn decode(raw: u32) -> Self {
        let v = raw & VALUE_MASK;
        match raw >> KIND_SHIFT {
            0 => PageKind::Free,
            1 => PageKind::Meta,
            2 => PageKind::Slab(v),
            3 => PageKind::RunHead(v),
            4 => PageKind::RunTail,
            5 => PageKind::ScopeHead(v),
            _ => PageKind::ScopeTail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HeapError {
    #[error("heap out of memory: cannot allocate {requested} bytes")]
    OutOfMemory { requested: u64 },
    #[error("double free of {0:#x}")]
    DoubleFree(u64),
    #[error("{0:#x} is not an allocation of this heap")]
    InvalidFree(u64),
    #[error("not a formatted heap (bad magic or version)")]
    BadMagic,
    #[error("unsupported page size {0}; only 4096-byte pages are supported")]
    UnsupportedPageSize(u64),
    #[error("heap of {0} bytes is too small to hold its metadata")]
    TooSmall(u64),
    #[error("alignment {0} is not a power of two")]
    BadAlignment(u64),
    #[error("scope is {0:?}")]
    ScopeState(ScopeState),
    #[error("scope full: {requested} bytes requested, {remaining} remaining")]
    ScopeFull { requested: u64, remaining: u64 },
    #[error("root slot {0} out of range")]
    BadRoot(usize),
}

#[repr(C)]
struct Header {
    magic: [u8; 8],
    version: u32,
    page_size: u32,
    heap_size: u64,
    lock: AtomicU32,
    flags: u32,
    alloc_count: u64,
    page_count: u64,
    meta_pages: u64,
    scope_count: u64,
    next_scope_id: u64,
    search_hint: u64,
    slab_heads: [u32; 8],
    _pad: [u8; 16],
    roots: [AtomicU64; ROOT_SLOTS],
}

const _: () = assert!(std::mem::size_of::<Header>() == 256);
const _: () = assert!(std::mem::offset_of!(Header, lock) == 24);
const _: () = assert!(std::mem::offset_of!(Header, slab_heads) == 80);
const _: () = assert!(std::mem::offset_of!(Header, roots) == 128);

#[repr(C)]
#[derive(Clone, Copy)]
struct PageDesc {
    kind: u32,
    next: u32,
    used: u32,
    _pad: u32,
    bitmap: [u64; 4],
}

const _: () = assert!(std::mem::size_of::<PageDesc>() == DESC_SIZE as usize);

/// Snapshot of allocator counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeapStats {
    pub live_allocations: u64,
    pub free_pages: u64,
    pub page_count: u64,
    pub meta_pages: u64,
    pub scopes: u64,
}

/// Typed address inside a shared heap. Valid in every process mapping it.
#[repr(transparent)]
pub struct ShmPtr<T> {
    addr: u64,
    _t: std::marker::PhantomData<*mut T>,
}

impl<T> Clone for ShmPtr<T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T> Copy for ShmPtr<T> {}

impl<T> PartialEq for ShmPtr<T> {
    fn eq(&self, o: &Self) -> bool {
        self.addr == o.addr
    }
}
impl<T> Eq for ShmPtr<T> {}

impl<T> std::fmt::Debug for ShmPtr<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ShmPtr({:#x})", self.addr)
    }
}

// SAFETY: an address is plain data; dereferencing is unsafe anyway.
unsafe impl<T> Send for ShmPtr<T> {}
unsafe impl<T> Sync for ShmPtr<T> {}

impl<T> ShmPtr<T> {
    pub const fn from_addr(addr: u64) -> Self {
        Self {
            addr,
            _t: std::marker::PhantomData,
        }
    }

    pub const fn null() -> Self {
        Self::from_addr(0)
    }

    pub fn is_null(self) -> bool {
        self.addr == 0
    }

    pub fn addr(self) -> u64 {
        self.addr
    }

    pub fn as_ptr(self) -> *mut T {
        self.addr as *mut T
    }

    /// # Safety
    /// The address must point to a live, initialised `T` in a mapped heap.
    pub unsafe fn as_ref<'a>(self) -> &'a T {
        &*self.as_ptr()
    }

    /// # Safety
    /// As [`Self::as_ref`], and no other reference may alias it.
    #[allow(clippy::mut_from_ref)]
    pub unsafe fn as_mut<'a>(self) -> &'a mut T {
        &mut *self.as_ptr()
    }

    pub fn cast<U>(self) -> ShmPtr<U> {
        ShmPtr::from_addr(self.addr)
    }
}

/// Anything that hands out memory inside a shared heap.
pub trait ShmAlloc {
    fn alloc_bytes(&self, size: u64, align: u64) -> Result<u64, HeapError>;
    /// Frees `addr`; allocators that reclaim in bulk may ignore this.
    fn free_bytes(&self, addr: u64) -> Result<(), HeapError>;

    fn alloc_value<T: Copy>(&self, v: T) -> Result<ShmPtr<T>, HeapError> {
        let addr = self.alloc_bytes(std::mem::size_of::<T>().max(1) as u64, std::mem::align_of::<T>() as u64)?;
        // SAFETY: freshly allocated, correctly sized and aligned.
        unsafe { std::ptr::write(addr as *mut T, v) };
        Ok(ShmPtr::from_addr(addr))
    }

    fn alloc_slice<T: Copy>(&self, items: &[T]) -> Result<ShmPtr<T>, HeapError> {
        let size = std::mem::size_of_val(items).max(1) as u64;
        let addr = self.alloc_bytes(size, std::mem::align_of::<T>() as u64)?;
        // SAFETY: freshly allocated region of the right size.
        unsafe { std::ptr::copy_nonoverlapping(items.as_ptr(), addr as *mut T, items.len()) };
        Ok(ShmPtr::from_addr(addr))
    }
}

/// A formatted shared heap.
#[derive(Clone)]
pub struct SharedHeap {
    map: Arc<HeapMapping>,
}

fn class_of(size: u64, align: u64) -> Option<usize> {
    let need = size.max(align).max(16);
    if need > MAX_SLAB_OBJECT {
        return None;
    }
    let c = need.next_power_of_two();
    Some(c.trailing_zeros() as usize - 4)
}

fn slots_in(class: usize) -> u32 {
    (PAGE / SIZE_CLASSES[class] as u64) as u32
}

impl SharedHeap {
    /// Writes a fresh header and descriptor table. Everything previously in
    /// the heap is forgotten.
    pub fn format(map: Arc<HeapMapping>) -> Result<Self, HeapError> {
        crate::runtime::fault::ensure_thread_access();
        if map.page_size() as u64 != PAGE {
            return Err(HeapError::UnsupportedPageSize(map.page_size() as u64));
        }
        let size = map.size();
        let pages = size / PAGE;
        let meta = 1 + (pages * DESC_SIZE).div_ceil(PAGE);
        if pages <= meta {
            return Err(HeapError::TooSmall(size));
        }
        let h = Self { map };
        // SAFETY: the header page is mapped writable by the creator.
        unsafe {
            let hdr = h.header_ptr();
            std::ptr::write_bytes(hdr as *mut u8, 0, PAGE as usize);
            std::ptr::write_bytes(
                (h.base() + DESC_TABLE) as *mut u8,
                0,
                (pages * DESC_SIZE) as usize,
            );
            (*hdr).version = VERSION;
            (*hdr).page_size = PAGE as u32;
            (*hdr).heap_size = size;
            (*hdr).page_count = pages;
            (*hdr).meta_pages = meta;
            (*hdr).next_scope_id = 1;
            (*hdr).search_hint = meta;
            for p in 0..meta {
                h.set_kind(p as u32, PageKind::Meta);
            }
            std::sync::atomic::fence(Ordering::SeqCst);
            (*hdr).magic = MAGIC;
        }
        Ok(h)
    }

    /// Opens a heap formatted by another process.
    pub fn open(map: Arc<HeapMapping>) -> Result<Self, HeapError> {
        crate::runtime::fault::ensure_thread_access();
        let h = Self { map };
        // SAFETY: header page is mapped (possibly faulting in via fallback).
        unsafe {
            let hdr = h.header_ptr();
            if (*hdr).magic != MAGIC || (*hdr).version != VERSION {
                return Err(HeapError::BadMagic);
            }
            if (*hdr).page_size as u64 != PAGE {
                return Err(HeapError::UnsupportedPageSize((*hdr).page_size as u64));
            }
            if (*hdr).heap_size != h.map.size() {
                return Err(HeapError::BadMagic);
            }
        }
        Ok(h)
    }

    pub fn mapping(&self) -> &Arc<HeapMapping> {
        &self.map
    }

    pub fn base(&self) -> u64 {
        self.map.base()
    }

    pub fn size(&self) -> u64 {
        self.map.size()
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.map.contains(addr)
    }

    fn header_ptr(&self) -> *mut Header {
        self.base() as *mut Header
    }

    fn desc_ptr(&self, page: u32) -> *mut PageDesc {
        (self.base() + DESC_TABLE + page as u64 * DESC_SIZE) as *mut PageDesc
    }

    // Descriptors live in the mapped heap, not in `self`; callers hold the
    // heap lock.
    #[allow(clippy::mut_from_ref)]
    unsafe fn desc(&self, page: u32) -> &mut PageDesc {
        &mut *self.desc_ptr(page)
    }

    unsafe fn set_kind(&self, page: u32, k: PageKind) {
        self.desc(page).kind = k.encode();
    }

    pub fn page_kind(&self, page: u32) -> PageKind {
        // SAFETY: page descriptors are always mapped; reads are benign.
        unsafe { PageKind::decode(std::ptr::read_volatile(&(*self.desc_ptr(page)).kind)) }
    }

    fn page_addr(&self, page: u32) -> u64 {
        self.base() + page as u64 * PAGE
    }

    fn lock(&self) -> HeapGuard<'_> {
        crate::runtime::fault::ensure_thread_access();
        // SAFETY: header mapped; the lock word is an atomic.
        let lock = unsafe { &(*self.header_ptr()).lock };
        let mut spins = 0u32;
        loop {
            if lock
                .compare_exchange_weak(0, 1, Ordering::Acquire, Ordering::Relaxed)
                .is_ok()
            {
                return HeapGuard { lock };
            }
            spins += 1;
            if spins < 64 {
                std::hint::spin_loop();
            } else {
                std::thread::yield_now();
            }
        }
    }

    /// Allocates `size` bytes aligned to `align` (at most one page).
    pub fn alloc(&self, size: u64, align: u64) -> Result<u64, HeapError> {
        if !align.is_power_of_two() {
            return Err(HeapError::BadAlignment(align));
        }
        if align > PAGE {
            return Err(HeapError::BadAlignment(align));
        }
        let _g = self.lock();
        // SAFETY: metadata accesses under the heap lock.
        unsafe {
            let addr = match class_of(size, align) {
                Some(c) => self.slab_alloc(c)?,
                None => {
                    let n = size.div_ceil(PAGE);
                    let p = self.run_alloc(n, |n| PageKind::RunHead(n as u32), PageKind::RunTail)
                        .ok_or(HeapError::OutOfMemory { requested: size })?;
                    self.page_addr(p)
                }
            };
            (*self.header_ptr()).alloc_count += 1;
            Ok(addr)
        }
    }

    pub fn free(&self, addr: u64) -> Result<(), HeapError> {
        let meta_end = {
            // SAFETY: header read.
            self.base() + unsafe { (*self.header_ptr()).meta_pages } * PAGE
        };
        if addr < meta_end || addr >= self.map.end() {
            return Err(HeapError::InvalidFree(addr));
        }
        let page = ((addr - self.base()) / PAGE) as u32;
        let _g = self.lock();
        // SAFETY: metadata accesses under the heap lock.
        unsafe {
            match self.page_kind(page) {
                PageKind::Slab(c) => self.slab_free(page, c as usize, addr)?,
                PageKind::RunHead(n) if addr % PAGE == 0 => self.run_free(page, n as u64),
                PageKind::Free => return Err(HeapError::DoubleFree(addr)),
                _ => return Err(HeapError::InvalidFree(addr)),
            }
            (*self.header_ptr()).alloc_count -= 1;
        }
        Ok(())
    }

    unsafe fn slab_alloc(&self, c: usize) -> Result<u64, HeapError> {
        let hdr = self.header_ptr();
        let mut page = (*hdr).slab_heads[c];
        if page == 0 {
            page = self
                .run_alloc(1, |_| PageKind::Slab(c as u32), PageKind::RunTail)
                .ok_or(HeapError::OutOfMemory {
                    requested: SIZE_CLASSES[c] as u64,
                })?;
            let d = self.desc(page);
            d.used = 0;
            d.bitmap = [0; 4];
            d.next = 0;
            (*hdr).slab_heads[c] = page;
        }
        let d = self.desc(page);
        let slots = slots_in(c);
        let mut idx = None;
        for (w, word) in d.bitmap.iter_mut().enumerate() {
            if *word != u64::MAX {
                let b = (!*word).trailing_zeros();
                let i = w as u32 * 64 + b;
                if i < slots {
                    *word |= 1 << b;
                    idx = Some(i);
                }
                break;
            }
        }
        let idx = idx.expect("slab on free list has a free slot");
        d.used += 1;
        if d.used == slots {
            (*hdr).slab_heads[c] = d.next;
            d.next = 0;
        }
        Ok(self.page_addr(page) + idx as u64 * SIZE_CLASSES[c] as u64)
    }

    unsafe fn slab_free(&self, page: u32, c: usize, addr: u64) -> Result<(), HeapError> {
        let class = SIZE_CLASSES[c] as u64;
        let off = addr - self.page_addr(page);
        if off % class != 0 {
            return Err(HeapError::InvalidFree(addr));
        }
        let i = (off / class) as usize;
        let d = self.desc(page);
        let bit = 1u64 << (i % 64);
        if d.bitmap[i / 64] & bit == 0 {
            return Err(HeapError::DoubleFree(addr));
        }
        let slots = slots_in(c);
        let was_full = d.used == slots;
        d.bitmap[i / 64] &= !bit;
        d.used -= 1;
        let hdr = self.header_ptr();
        if was_full {
            d.next = (*hdr).slab_heads[c];
            (*hdr).slab_heads[c] = page;
        }
        if d.used == 0 {
            // Unlink and return the page.
            let mut cur = &mut (*hdr).slab_heads[c] as *mut u32;
            while *cur != 0 {
                if *cur == page {
                    *cur = d.next;
                    break;
                }
                cur = &mut self.desc(*cur).next;
            }
            d.next = 0;
            self.run_free(page, 1);
        }
        Ok(())
    }

    /// First-fit run of `n` free pages, tagged with `head(n)` and `tail`.
    unsafe fn run_alloc(
        &self,
        n: u64,
        head: impl Fn(u64) -> PageKind,
        tail: PageKind,
    ) -> Option<u32> {
        let hdr = self.header_ptr();
        let total = (*hdr).page_count;
        if n == 0 || n > VALUE_MASK as u64 {
            return None;
        }
        let mut p = (*hdr).search_hint.max((*hdr).meta_pages);
        let mut first_free = None;
        while p + n <= total {
            if self.page_kind(p as u32) != PageKind::Free {
                p += 1;
                continue;
            }
            first_free.get_or_insert(p);
            let mut len = 1;
            while len < n && self.page_kind((p + len) as u32) == PageKind::Free {
                len += 1;
            }
            if len == n {
                self.set_kind(p as u32, head(n));
                for q in p + 1..p + n {
                    self.set_kind(q as u32, tail);
                }
                if first_free == Some(p) {
                    // Everything below p + n is now in use.
                    let mut h = p + n;
                    while h < total && self.page_kind(h as u32) != PageKind::Free {
                        h += 1;
                    }
                    (*hdr).search_hint = h;
                }
                return Some(p as u32);
            }
            p += len;
        }
        None
    }

    unsafe fn run_free(&self, page: u32, n: u64) {
        for q in page as u64..page as u64 + n {
            let d = self.desc(q as u32);
            d.kind = PageKind::Free.encode();
            d.used = 0;
            d.next = 0;
            d.bitmap = [0; 4];
        }
        let hdr = self.header_ptr();
        if (page as u64) < (*hdr).search_hint {
            (*hdr).search_hint = page as u64;
        }
    }

    /// Size in bytes of the allocation starting at `addr`, if it is one.
    pub fn allocation_size(&self, addr: u64) -> Option<u64> {
        if !self.contains(addr) {
            return None;
        }
        let page = ((addr - self.base()) / PAGE) as u32;
        match self.page_kind(page) {
            PageKind::Slab(c) => Some(SIZE_CLASSES[c as usize] as u64),
            PageKind::RunHead(n) if addr % PAGE == 0 => Some(n as u64 * PAGE),
            _ => None,
        }
    }

    pub fn stats(&self) -> HeapStats {
        let _g = self.lock();
        // SAFETY: under lock.
        unsafe {
            let hdr = self.header_ptr();
            let pages = (*hdr).page_count;
            let free = (0..pages)
                .filter(|&p| self.page_kind(p as u32) == PageKind::Free)
                .count() as u64;
            HeapStats {
                live_allocations: (*hdr).alloc_count,
                free_pages: free,
                page_count: pages,
                meta_pages: (*hdr).meta_pages,
                scopes: (*hdr).scope_count,
            }
        }
    }

    pub fn root(&self, slot: usize) -> Result<u64, HeapError> {
        if slot >= ROOT_SLOTS {
            return Err(HeapError::BadRoot(slot));
        }
        crate::runtime::fault::ensure_thread_access();
        // SAFETY: header mapped.
        Ok(unsafe { (*self.header_ptr()).roots[slot].load(Ordering::Acquire) })
    }

    pub fn set_root(&self, slot: usize, v: u64) -> Result<(), HeapError> {
        if slot >= ROOT_SLOTS {
            return Err(HeapError::BadRoot(slot));
        }
        crate::runtime::fault::ensure_thread_access();
        // SAFETY: header mapped.
        unsafe { (*self.header_ptr()).roots[slot].store(v, Ordering::Release) };
        Ok(())
    }

    /// Allocates a scope able to hold `size` bytes of objects.
    pub fn create_scope(&self, size: u64) -> Result<Scope, HeapError> {
        let mut v = self.create_scopes(1, size)?;
        Ok(v.pop().unwrap())
    }

    /// Allocates `count` equally sized scopes from one contiguous run.
    pub fn create_scopes(&self, count: usize, size: u64) -> Result<Vec<Scope>, HeapError> {
        let pages = (size + scope::HEADER_SIZE).div_ceil(PAGE).max(1);
        let total = pages * count as u64;
        let _g = self.lock();
        // SAFETY: metadata under lock; scope header pages are writable.
        unsafe {
            let first = self
                .run_alloc(total, |_| PageKind::ScopeTail, PageKind::ScopeTail)
                .ok_or(HeapError::OutOfMemory {
                    requested: total * PAGE,
                })?;
            let hdr = self.header_ptr();
            let mut out = Vec::with_capacity(count);
            for i in 0..count as u64 {
                let p = first + (i * pages) as u32;
                self.set_kind(p, PageKind::ScopeHead(pages as u32));
                let id = (*hdr).next_scope_id;
                (*hdr).next_scope_id += 1;
                (*hdr).scope_count += 1;
                let start = self.page_addr(p);
                scope::init_header(start, id, pages * PAGE);
                out.push(Scope::new(self.clone(), start, pages * PAGE, id));
            }
            Ok(out)
        }
    }

    pub(crate) fn destroy_scope_pages(&self, start: u64) -> Result<(), HeapError> {
        let page = ((start - self.base()) / PAGE) as u32;
        let _g = self.lock();
        // SAFETY: metadata under lock.
        unsafe {
            match self.page_kind(page) {
                PageKind::ScopeHead(n) => {
                    self.run_free(page, n as u64);
                    (*self.header_ptr()).scope_count -= 1;
                    Ok(())
                }
                PageKind::Free => Err(HeapError::DoubleFree(start)),
                _ => Err(HeapError::InvalidFree(start)),
            }
        }
    }
}

struct HeapGuard<'a> {
    lock: &'a AtomicU32,
}

impl Drop for HeapGuard<'_> {
    fn drop(&mut self) {
        self.lock.store(0, Ordering::Release);
    }
}

impl ShmAlloc for SharedHeap {
    fn alloc_bytes(&self, size: u64, align: u64) -> Result<u64, HeapError> {
        self.alloc(size, align)
    }

    fn free_bytes(&self, addr: u64) -> Result<(), HeapError> {
        self.free(addr)
    }
}

impl std::fmt::Debug for SharedHeap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SharedHeap({} @ {:#x}+{:#x})", self.map.heap_id(), self.base(), self.size())
    }
}

#[cfg(test)]
pub(crate) mod tests;
