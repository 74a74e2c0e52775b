//! Process-private memory that sandboxes cannot reach.

use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Mutex;

use crate::runtime::fault::{self, perm, RegionHandle, PORTABLE_GEN};
use crate::runtime::sys;

/// Ranges of every live private region.
static REGIONS: Mutex<Vec<(u64, u64)>> = Mutex::new(Vec::new());

pub(crate) fn regions() -> std::sync::MutexGuard<'static, Vec<(u64, u64)>> {
    REGIONS.lock().unwrap_or_else(|e| e.into_inner())
}

/// Anonymous read-write memory hidden from every sandbox.
///
/// Use it for secrets and other state a sandboxed handler must not read,
/// such as keys or session tables.
pub struct PrivateRegion {
    ptr: *mut u8,
    len: usize,
    _perms: Box<[AtomicU8]>,
    region: Option<RegionHandle>,
}

// SAFETY: owns its mapping; access follows Rust borrowing through &/&mut.
unsafe impl Send for PrivateRegion {}
unsafe impl Sync for PrivateRegion {}

impl PrivateRegion {
    pub fn new(len: usize) -> std::io::Result<Self> {
        super::system();
        let ps = crate::config::host_page_size();
        let len = len.max(1).next_multiple_of(ps);
        let ptr = sys::mmap_any(len, sys::PROT_RW, libc::MAP_PRIVATE | libc::MAP_ANONYMOUS, -1)?;
        let perms: Box<[AtomicU8]> = (0..len / ps).map(|_| AtomicU8::new(perm::RW)).collect();
        let lo = ptr as u64;
        // SAFETY: perms lives in self next to the handle.
        let region = unsafe {
            fault::register_region(lo, lo + len as u64, ps.trailing_zeros(), perms.as_ptr(), std::ptr::null())
        };
        let Some(region) = region else {
            // SAFETY: mapped above.
            unsafe { sys::munmap(ptr, len) };
            return Err(std::io::Error::other("too many registered regions"));
        };
        let mut list = regions();
        // SAFETY: the fresh mapping.
        unsafe {
            if let Some(key) = super::protected_key() {
                sys::pkey_mprotect(lo, len, sys::PROT_RW, key)?;
            }
            if PORTABLE_GEN.load(Ordering::Acquire) & 1 == 1 {
                sys::mprotect(lo, len, sys::PROT_NONE)?;
            }
        }
        list.push((lo, lo + len as u64));
        Ok(Self {
            ptr,
            len,
            _perms: perms,
            region: Some(region),
        })
    }

    pub fn addr(&self) -> u64 {
        self.ptr as u64
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[u8] {
        fault::ensure_thread_access();
        // SAFETY: mapped for self's lifetime.
        unsafe { std::slice::from_raw_parts(self.ptr, self.len) }
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        fault::ensure_thread_access();
        // SAFETY: mapped for self's lifetime, borrowed exclusively.
        unsafe { std::slice::from_raw_parts_mut(self.ptr, self.len) }
    }
}

impl Drop for PrivateRegion {
    fn drop(&mut self) {
        let lo = self.ptr as u64;
        regions().retain(|r| r.0 != lo);
        drop(self.region.take());
        // SAFETY: mapped by new().
        unsafe { sys::munmap(self.ptr, self.len) };
    }
}
