//! Growable containers whose headers and contents live in a shared heap.
//!
//! The handle is just the header address, so it can be stored in other heap
//! objects or sent in a message and reopened with `from_ptr`.

use std::marker::PhantomData;

use super::{HeapError, ShmAlloc, ShmPtr};

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct VecHeader {
    pub data: u64,
    pub len: u64,
    pub cap: u64,
}

/// `Vec`-like sequence of `Copy` values in shared memory.
pub struct ShmVec<T: Copy> {
    hdr: ShmPtr<VecHeader>,
    _t: PhantomData<T>,
}

impl<T: Copy> Clone for ShmVec<T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Copy> Copy for ShmVec<T> {}

impl<T: Copy> ShmVec<T> {
    pub fn new_in(a: &impl ShmAlloc) -> Result<Self, HeapError> {
        Self::with_capacity_in(a, 0)
    }

    pub fn with_capacity_in(a: &impl ShmAlloc, cap: u64) -> Result<Self, HeapError> {
        let data = if cap == 0 {
            0
        } else {
            a.alloc_bytes(cap * std::mem::size_of::<T>() as u64, std::mem::align_of::<T>() as u64)?
        };
        let hdr = a.alloc_value(VecHeader { data, len: 0, cap })?;
        Ok(Self::from_ptr(hdr))
    }

    pub fn from_slice_in(a: &impl ShmAlloc, items: &[T]) -> Result<Self, HeapError> {
        let v = Self::with_capacity_in(a, items.len() as u64)?;
        if !items.is_empty() {
            // SAFETY: capacity was just reserved for `items.len()` values.
            unsafe {
                std::ptr::copy_nonoverlapping(items.as_ptr(), v.header().data as *mut T, items.len());
                (*v.hdr.as_ptr()).len = items.len() as u64;
            }
        }
        Ok(v)
    }

    pub fn from_ptr(hdr: ShmPtr<VecHeader>) -> Self {
        Self {
            hdr,
            _t: PhantomData,
        }
    }

    pub fn as_ptr(&self) -> ShmPtr<VecHeader> {
        self.hdr
    }

    fn header(&self) -> VecHeader {
        // SAFETY: the header was allocated by this type and is mapped.
        unsafe { std::ptr::read(self.hdr.as_ptr()) }
    }

    pub fn len(&self) -> usize {
        self.header().len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, a: &impl ShmAlloc, v: T) -> Result<(), HeapError> {
        let h = self.header();
        let elem = std::mem::size_of::<T>() as u64;
        let mut data = h.data;
        if h.len == h.cap {
            let cap = (h.cap * 2).max(4);
            let fresh = a.alloc_bytes(cap * elem, std::mem::align_of::<T>() as u64)?;
            if h.len > 0 {
                // SAFETY: both ranges are live heap allocations.
                unsafe {
                    std::ptr::copy_nonoverlapping(h.data as *const T, fresh as *mut T, h.len as usize)
                };
            }
            if h.data != 0 {
                a.free_bytes(h.data)?;
            }
            data = fresh;
            // SAFETY: header is live.
            unsafe {
                (*self.hdr.as_ptr()).data = fresh;
                (*self.hdr.as_ptr()).cap = cap;
            }
        }
        // SAFETY: index len < cap.
        unsafe {
            std::ptr::write((data as *mut T).add(h.len as usize), v);
            (*self.hdr.as_ptr()).len = h.len + 1;
        }
        Ok(())
    }

    pub fn get(&self, i: usize) -> Option<T> {
        let h = self.header();
        // SAFETY: bounds checked.
        (i < h.len as usize).then(|| unsafe { std::ptr::read((h.data as *const T).add(i)) })
    }

    pub fn set(&mut self, i: usize, v: T) -> bool {
        let h = self.header();
        if i >= h.len as usize {
            return false;
        }
        // SAFETY: bounds checked.
        unsafe { std::ptr::write((h.data as *mut T).add(i), v) };
        true
    }

    /// Borrow of the contents.
    ///
    /// # Safety
    /// No process may mutate the vector while the slice is alive.
    pub unsafe fn as_slice<'a>(&self) -> &'a [T] {
        let h = self.header();
        if h.len == 0 {
            return &[];
        }
        std::slice::from_raw_parts(h.data as *const T, h.len as usize)
    }

    pub fn to_vec(&self) -> Vec<T> {
        // SAFETY: copied out immediately.
        unsafe { self.as_slice().to_vec() }
    }

    /// Frees the contents and the header.
    pub fn free(self, a: &impl ShmAlloc) -> Result<(), HeapError> {
        let h = self.header();
        if h.data != 0 {
            a.free_bytes(h.data)?;
        }
        a.free_bytes(self.hdr.addr())
    }
}

/// Byte string in shared memory.
#[derive(Clone, Copy)]
pub struct ShmBytes(ShmVec<u8>);

impl ShmBytes {
    pub fn from_slice_in(a: &impl ShmAlloc, b: &[u8]) -> Result<Self, HeapError> {
        ShmVec::from_slice_in(a, b).map(Self)
    }

    pub fn from_ptr(hdr: ShmPtr<VecHeader>) -> Self {
        Self(ShmVec::from_ptr(hdr))
    }

    pub fn as_ptr(&self) -> ShmPtr<VecHeader> {
        self.0.as_ptr()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.0.to_vec()
    }

    pub fn to_string_lossy(&self) -> String {
        String::from_utf8_lossy(&self.to_vec()).into_owned()
    }

    pub fn free(self, a: &impl ShmAlloc) -> Result<(), HeapError> {
        self.0.free(a)
    }
}
