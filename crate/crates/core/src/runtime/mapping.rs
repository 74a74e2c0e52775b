//! Fixed-address heap mappings.
//!
//! Every heap is mapped at the address the orchestrator assigned, so raw
//! pointers stored inside it are valid in every process that maps it. A
//! second, privileged alias of the same backing lets the runtime write pages
//! whose fixed-address view is read-only or absent.
//!
//! Mappings are shared process-wide: two runtimes in one process that use the
//! same heap get the same [`HeapMapping`].

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicI32, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock, Weak};

use super::fault::{self, perm, RegionHandle, Resolver};
use super::sys;
use crate::ids::HeapId;
use crate::orchestrator::HeapDescriptor;

#[derive(Debug, thiserror::Error)]
pub enum MapError {
    #[error(
        "address range {base:#x}..{end:#x} is already occupied in this process; \
         another mapping overlaps the shared pool ({detail})"
    )]
    AddressInUse { base: u64, end: u64, detail: String },
    #[error("heap backing {path}: {source}")]
    Backing { path: PathBuf, source: io::Error },
    #[error("mapping heap {heap}: {source}")]
    Io { heap: HeapId, source: io::Error },
    #[error("too many registered regions")]
    TooManyRegions,
}

/// How the fixed-address view is backed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backing {
    /// A file in the shared pool directory.
    Pool,
    /// An anonymous mirror filled page by page by the fallback transport.
    Mirror,
}

pub struct HeapMapping {
    desc: HeapDescriptor,
    backing: Backing,
    page_shift: u32,
    alias: *mut u8,
    perms: Box<[AtomicU8]>,
    perm_lock: Mutex<PermState>,
    region: Mutex<Option<RegionHandle>>,
    resolver: OnceLock<Box<Resolver>>,
    /// Protection key all pages currently carry, or 0.
    pkey: AtomicI32,
    active_seals: AtomicUsize,
    path: Option<PathBuf>,
}

// SAFETY: the raw alias pointer refers to a process-wide shared mapping whose
// lifetime is tied to this struct; all mutation goes through atomics/locks.
unsafe impl Send for HeapMapping {}
unsafe impl Sync for HeapMapping {}

/// Protection state guarded by the permission lock.
#[derive(Default)]
pub(crate) struct PermState {
    /// While a portable sandbox runs, only this range keeps its protection;
    /// the rest of the heap is inaccessible and changes are only recorded.
    portable_allow: Option<(u64, u64)>,
}

type Registry = Mutex<HashMap<(u64, u64), Weak<HeapMapping>>>;

fn registry() -> &'static Registry {
    static R: OnceLock<Registry> = OnceLock::new();
    R.get_or_init(Default::default)
}

pub fn backing_path(pool_dir: &Path, desc: &HeapDescriptor) -> PathBuf {
    pool_dir.join(&desc.backing)
}

impl HeapMapping {
    /// Maps `desc` from the pool, creating (and zeroing) the backing file when
    /// `create` is set. Returns the existing mapping if this process already
    /// has one.
    pub fn map_pool(
        desc: &HeapDescriptor,
        pool_dir: &Path,
        create: bool,
    ) -> Result<Arc<Self>, MapError> {
        Self::get_or_map(desc, Backing::Pool, || {
            let path = backing_path(pool_dir, desc);
            if create {
                std::fs::create_dir_all(pool_dir).map_err(|source| MapError::Backing {
                    path: pool_dir.to_path_buf(),
                    source,
                })?;
            }
            let file = OpenOptions::new()
                .read(true)
                .write(true)
                .create(create)
                .truncate(create)
                .open(&path)
                .map_err(|source| MapError::Backing {
                    path: path.clone(),
                    source,
                })?;
            if create {
                file.set_len(desc.size)
                    .map_err(|source| MapError::Backing {
                        path: path.clone(),
                        source,
                    })?;
            } else {
                let len = file.metadata().map(|m| m.len()).unwrap_or(0);
                if len < desc.size {
                    return Err(MapError::Backing {
                        path,
                        source: io::Error::new(
                            io::ErrorKind::UnexpectedEof,
                            format!("backing holds {len} bytes, heap needs {}", desc.size),
                        ),
                    });
                }
            }
            Ok((OwnedFd::from(file), Some(path)))
        })
    }

    /// Maps an anonymous mirror of `desc` with every page absent.
    pub fn map_mirror(desc: &HeapDescriptor) -> Result<Arc<Self>, MapError> {
        Self::get_or_map(desc, Backing::Mirror, || {
            let fd =
                sys::memfd(&format!("rpcool-{}", desc.backing), desc.size).map_err(|source| {
                    MapError::Io {
                        heap: desc.heap_id,
                        source,
                    }
                })?;
            // SAFETY: fd was just created and is owned here.
            Ok((unsafe { OwnedFd::from_raw_fd(fd) }, None))
        })
    }

    fn get_or_map(
        desc: &HeapDescriptor,
        backing: Backing,
        open: impl FnOnce() -> Result<(OwnedFd, Option<PathBuf>), MapError>,
    ) -> Result<Arc<Self>, MapError> {
        let key = (desc.heap_id.0, desc.base);
        let mut reg = registry().lock().unwrap_or_else(|e| e.into_inner());
        if let Some(m) = reg.get(&key).and_then(Weak::upgrade) {
            return Ok(m);
        }
        let (fd, path) = open()?;
        let len = desc.size as usize;
        let initial = match backing {
            Backing::Pool => perm::RW,
            Backing::Mirror => perm::NONE | perm::ABSENT,
        };
        let fixed = sys::mmap_fixed(
            desc.base,
            len,
            perm::to_prot(initial),
            libc::MAP_SHARED,
            fd.as_raw_fd(),
        )
        .map_err(|e| {
            if e.kind() == io::ErrorKind::AddrInUse {
                MapError::AddressInUse {
                    base: desc.base,
                    end: desc.end(),
                    detail: e.to_string(),
                }
            } else {
                MapError::Io {
                    heap: desc.heap_id,
                    source: e,
                }
            }
        })?;
        let alias = match sys::mmap_any(len, sys::PROT_RW, libc::MAP_SHARED, fd.as_raw_fd()) {
            Ok(a) => a,
            Err(source) => {
                // SAFETY: just mapped above.
                unsafe { sys::munmap(fixed, len) };
                return Err(MapError::Io {
                    heap: desc.heap_id,
                    source,
                });
            }
        };
        let page_size = crate::config::host_page_size();
        let pages = len / page_size;
        let m = Arc::new(Self {
            desc: desc.clone(),
            backing,
            page_shift: page_size.trailing_zeros(),
            alias,
            perms: (0..pages).map(|_| AtomicU8::new(initial)).collect(),
            perm_lock: Mutex::new(PermState::default()),
            region: Mutex::new(None),
            resolver: OnceLock::new(),
            pkey: AtomicI32::new(0),
            active_seals: AtomicUsize::new(0),
            path,
        });
        if backing == Backing::Pool {
            m.register(std::ptr::null())?;
        }
        if let Some(key) = crate::sandbox::protected_key() {
            m.rekey_all(key);
        }
        reg.retain(|_, w| w.strong_count() > 0);
        reg.insert(key, Arc::downgrade(&m));
        Ok(m)
    }

    fn register(&self, resolver: *const Resolver) -> Result<(), MapError> {
        // SAFETY: perms and resolver live as long as self, which outlives the
        // handle stored in self.
        let h = unsafe {
            fault::register_region(
                self.desc.base,
                self.desc.end(),
                self.page_shift,
                self.perms.as_ptr(),
                resolver,
            )
        }
        .ok_or(MapError::TooManyRegions)?;
        // The new slot is live before the old one goes away.
        let old = self
            .region
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .replace(h);
        drop(old);
        Ok(())
    }

    /// Attaches the fallback page resolver. Only for mirrors and for pool
    /// mappings served to a fallback peer.
    pub(crate) fn install_resolver(&self, r: Resolver) -> Result<&Resolver, MapError> {
        let r = self.resolver.get_or_init(|| Box::new(r));
        self.register(&**r)?;
        Ok(r)
    }

    pub(crate) fn resolver(&self) -> Option<&Resolver> {
        self.resolver.get().map(|b| &**b)
    }

    pub fn descriptor(&self) -> &HeapDescriptor {
        &self.desc
    }

    pub fn heap_id(&self) -> HeapId {
        self.desc.heap_id
    }

    pub fn base(&self) -> u64 {
        self.desc.base
    }

    pub fn size(&self) -> u64 {
        self.desc.size
    }

    pub fn end(&self) -> u64 {
        self.desc.end()
    }

    pub fn backing(&self) -> Backing {
        self.backing
    }

    pub fn page_size(&self) -> usize {
        1 << self.page_shift
    }

    pub fn pages(&self) -> usize {
        self.perms.len()
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.desc.contains(addr)
    }

    pub fn contains_range(&self, addr: u64, len: u64) -> bool {
        len == 0 && self.contains(addr)
            || addr >= self.base() && addr.checked_add(len).is_some_and(|e| e <= self.end())
    }

    pub fn page_of(&self, addr: u64) -> usize {
        ((addr - self.base()) >> self.page_shift) as usize
    }

    pub fn page_addr(&self, page: usize) -> u64 {
        self.base() + ((page as u64) << self.page_shift)
    }

    pub fn backing_path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Privileged view of `addr`, writable regardless of the fixed view's
    /// protection.
    pub(crate) fn alias_of(&self, addr: u64) -> *mut u8 {
        debug_assert!(self.contains(addr));
        // SAFETY: addr is inside the heap, so the offset is inside the alias.
        unsafe { self.alias.add((addr - self.base()) as usize) }
    }

    pub(crate) fn perm(&self, page: usize) -> u8 {
        self.perms[page].load(Ordering::Acquire)
    }

    /// Sets the intended and actual protection of whole pages.
    pub(crate) fn set_range_permission(&self, start: u64, len: u64, bits: u8) -> io::Result<()> {
        let st = self.lock_perms();
        self.set_range_permission_locked(&st, start, len, bits)
    }

    pub(crate) fn lock_perms(&self) -> std::sync::MutexGuard<'_, PermState> {
        self.perm_lock.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// As [`Self::set_range_permission`] with the permission lock held.
    pub(crate) fn set_range_permission_locked(
        &self,
        st: &PermState,
        start: u64,
        len: u64,
        bits: u8,
    ) -> io::Result<()> {
        let ps = self.page_size() as u64;
        if start % ps != 0 || len % ps != 0 || !self.contains_range(start, len) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "range not page aligned within heap",
            ));
        }
        if len == 0 {
            return Ok(());
        }
        let first = self.page_of(start);
        let n = (len / ps) as usize;
        // Widening: record intent first so racing faults retry; narrowing:
        // change protection first.
        let widening = perm::to_prot(bits) != libc::PROT_NONE;
        if widening {
            for p in &self.perms[first..first + n] {
                p.store(bits, Ordering::Release);
            }
        }
        let (lo, hi) = match st.portable_allow {
            Some((a, b)) => (start.max(a), (start + len).min(b)),
            None => (start, start + len),
        };
        if lo < hi {
            // SAFETY: the range is inside this heap's fixed mapping.
            unsafe { sys::mprotect(lo, (hi - lo) as usize, perm::to_prot(bits))? };
        }
        if !widening {
            for p in &self.perms[first..first + n] {
                p.store(bits, Ordering::Release);
            }
        }
        Ok(())
    }

    /// Rewrites each page's bits with `f`, changing protection once per run
    /// of equal results.
    fn remap_bits(&self, start: u64, len: u64, f: impl Fn(u8) -> u8) -> io::Result<()> {
        let ps = self.page_size() as u64;
        if start % ps != 0 || len % ps != 0 || !self.contains_range(start, len) {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                "range not page aligned within heap",
            ));
        }
        let st = self.lock_perms();
        let first = self.page_of(start);
        let n = (len / ps) as usize;
        let mut i = 0;
        while i < n {
            let bits = f(self.perms[first + i].load(Ordering::Acquire));
            let mut j = i + 1;
            while j < n && f(self.perms[first + j].load(Ordering::Acquire)) == bits {
                j += 1;
            }
            self.set_range_permission_locked(
                &st,
                self.page_addr(first + i),
                (j - i) as u64 * ps,
                bits,
            )?;
            i = j;
        }
        Ok(())
    }

    /// Seals pages for this process: present pages become read-only, pages
    /// held by a fallback peer stay absent but remember the seal.
    pub(crate) fn seal_range(&self, start: u64, len: u64) -> io::Result<()> {
        self.remap_bits(start, len, |b| {
            if b & perm::ABSENT != 0 {
                perm::NONE | perm::ABSENT | perm::LOCAL_SEAL
            } else {
                perm::READ | perm::LOCAL_SEAL
            }
        })
    }

    pub(crate) fn unseal_range(&self, start: u64, len: u64) -> io::Result<()> {
        self.remap_bits(start, len, |b| {
            if b & perm::ABSENT != 0 {
                perm::NONE | perm::ABSENT
            } else {
                perm::RW
            }
        })
    }

    /// Runs of equal protection in `[first, first + n)` pages.
    fn prot_runs(&self, first: usize, n: usize) -> Vec<(usize, usize, u8)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < n {
            let bits = self.perms[first + i].load(Ordering::Acquire) & perm::PROT_MASK;
            let mut j = i + 1;
            while j < n && self.perms[first + j].load(Ordering::Acquire) & perm::PROT_MASK == bits {
                j += 1;
            }
            out.push((first + i, j - i, bits));
            i = j;
        }
        out
    }

    /// Revokes access to everything outside `allow` until
    /// [`Self::portable_unrestrict`].
    pub(crate) fn portable_restrict(&self, allow: (u64, u64)) -> io::Result<()> {
        let mut st = self.lock_perms();
        st.portable_allow = Some(allow);
        let (lo, hi) = (
            allow.0.clamp(self.base(), self.end()),
            allow.1.clamp(self.base(), self.end()),
        );
        // SAFETY: inside this mapping.
        unsafe {
            if lo > self.base() {
                sys::mprotect(self.base(), (lo - self.base()) as usize, libc::PROT_NONE)?;
            }
            if hi < self.end() && hi >= lo {
                sys::mprotect(hi, (self.end() - hi) as usize, libc::PROT_NONE)?;
            }
            if hi < lo {
                sys::mprotect(self.base(), self.size() as usize, libc::PROT_NONE)?;
            }
        }
        Ok(())
    }

    pub(crate) fn portable_unrestrict(&self) -> io::Result<()> {
        let mut st = self.lock_perms();
        st.portable_allow = None;
        let ps = self.page_size() as u64;
        for (p, n, bits) in self.prot_runs(0, self.pages()) {
            // SAFETY: inside this mapping.
            unsafe { sys::mprotect(self.page_addr(p), n * ps as usize, perm::to_prot(bits))? };
        }
        Ok(())
    }

    /// Assigns protection key `key` to `[start, start+len)`, keeping each
    /// page's permission.
    pub(crate) fn rekey(&self, start: u64, len: u64, key: i32) -> io::Result<()> {
        let _st = self.lock_perms();
        let ps = self.page_size() as u64;
        for (p, n, bits) in self.prot_runs(self.page_of(start), (len / ps) as usize) {
            // SAFETY: inside this mapping.
            unsafe {
                sys::pkey_mprotect(self.page_addr(p), n * ps as usize, perm::to_prot(bits), key)?
            };
        }
        Ok(())
    }

    pub(crate) fn rekey_all(&self, key: i32) {
        if let Err(e) = self.rekey(self.base(), self.size(), key) {
            log::warn!("cannot key heap {}: {e}", self.heap_id());
        } else {
            self.pkey.store(key, Ordering::Release);
        }
    }

    pub(crate) fn seal_opened(&self) {
        self.active_seals.fetch_add(1, Ordering::AcqRel);
    }

    pub(crate) fn seal_closed(&self) {
        self.active_seals.fetch_sub(1, Ordering::AcqRel);
    }

    pub fn active_seals(&self) -> usize {
        self.active_seals.load(Ordering::Acquire)
    }
}

impl Drop for HeapMapping {
    fn drop(&mut self) {
        // Unregister before unmapping so the handler never sees a stale range.
        drop(self.region.get_mut().map(|r| r.take()));
        let len = self.desc.size as usize;
        // SAFETY: both mappings were created by this struct.
        unsafe {
            sys::munmap(self.desc.base as *mut u8, len);
            sys::munmap(self.alias, len);
        }
    }
}

/// Visits every live mapping in this process.
pub(crate) fn for_each_mapping(mut f: impl FnMut(&Arc<HeapMapping>)) {
    let reg = registry().lock().unwrap_or_else(|e| e.into_inner());
    for w in reg.values() {
        if let Some(m) = w.upgrade() {
            f(&m);
        }
    }
}

/// Finds the mapping containing `addr`, if any.
pub fn mapping_containing(addr: u64) -> Option<Arc<HeapMapping>> {
    let reg = registry().lock().unwrap_or_else(|e| e.into_inner());
    reg.values()
        .filter_map(Weak::upgrade)
        .find(|m| m.contains(addr))
}
