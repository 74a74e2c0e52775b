//! Per-thread sandboxes that confine a handler to one range of a shared heap.
//!
//! While a thread is sandboxed it can reach the sandbox range, its temporary
//! arena and ordinary process memory (stack, globals, the malloc heap).
//! Every other page of every mapped heap and every [`PrivateRegion`] is
//! inaccessible; touching one becomes [`SandboxError::Violation`] instead of
//! a crash.
//!
//! With protection keys the runtime keeps one key for protected memory and a
//! cache of sandbox slots, each with its own key. Entering a cached sandbox is
//! a single PKRU write. A miss waits for an idle slot and re-keys the ranges
//! involved. Without keys (portable mode) sandboxes run one at a time and
//! revoke everything else with `mprotect`; other threads that touch revoked
//! memory wait until the sandbox ends.

mod alloc;
mod private;

pub use alloc::SandboxAlloc;
pub use private::PrivateRegion;

use std::marker::PhantomData;
use std::sync::atomic::{AtomicI32, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, OnceLock, Weak};

use crate::config::{RuntimeConfig, SandboxMode};
use crate::runtime::fault::{self, Fault, FaultKind, PORTABLE_GEN};
use crate::runtime::{for_each_mapping, mapping_containing, sys, HeapMapping};
use alloc::Arena;

pub const ENV_SANDBOX_MODE: &str = "RPCOOL_SANDBOX_MODE";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Hardware,
    Portable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SandboxInfo {
    pub mode: Mode,
    pub slots: usize,
    pub protected_key: Option<i32>,
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum SandboxError {
    #[error("{0}")]
    Violation(Fault),
    #[error("fault inside sandbox: {0}")]
    Fault(Fault),
    #[error("range {start:#x}+{len:#x} is not inside one mapped heap")]
    NotInHeap { start: u64, len: u64 },
    #[error("range {start:#x}+{len:#x} is not whole pages")]
    Unaligned { start: u64, len: u64 },
    #[error("this thread is already sandboxed")]
    Nested,
    #[error("sandbox is not active")]
    NotActive,
    #[error("copy-in of {0} bytes does not fit the arena")]
    ArenaFull(usize),
    #[error("sandbox setup: {0}")]
    Setup(#[from] std::io::Error),
}

impl SandboxError {
    pub fn is_violation(&self) -> bool {
        matches!(self, Self::Violation(_))
    }
}

impl From<Fault> for SandboxError {
    fn from(f: Fault) -> Self {
        match f.kind {
            FaultKind::SandboxViolation => Self::Violation(f),
            FaultKind::Access => Self::Fault(f),
        }
    }
}

static PROTECTED_KEY: AtomicI32 = AtomicI32::new(-1);
static SYSTEM: OnceLock<System> = OnceLock::new();

/// Key of protected memory, when running with protection keys.
pub fn protected_key() -> Option<i32> {
    let k = PROTECTED_KEY.load(Ordering::Acquire);
    (k >= 0).then_some(k)
}

struct Slot {
    /// Protection key, or -1 in portable mode.
    key: i32,
    arena: Arena,
}

struct Entry {
    range: (u64, u64),
    map: Weak<HeapMapping>,
    busy: bool,
    last_used: u64,
}

struct Table {
    entries: Vec<Entry>,
    tick: u64,
}

struct System {
    mode: Mode,
    slots: Box<[Slot]>,
    table: Mutex<Table>,
    idle: Condvar,
    portable: Mutex<()>,
    hits: AtomicU64,
    misses: AtomicU64,
}

/// Sets up sandboxing for this process. Only the first call's configuration
/// counts; later calls are no-ops.
pub fn init(cfg: &RuntimeConfig) {
    SYSTEM.get_or_init(|| System::new(cfg));
}

fn system() -> &'static System {
    SYSTEM.get_or_init(|| System::new(&RuntimeConfig::default()))
}

pub fn info() -> SandboxInfo {
    let s = system();
    SandboxInfo {
        mode: s.mode,
        slots: s.slots.len(),
        protected_key: protected_key(),
        hits: s.hits.load(Ordering::Relaxed),
        misses: s.misses.load(Ordering::Relaxed),
    }
}

fn requested_mode(cfg: &RuntimeConfig) -> SandboxMode {
    match std::env::var(ENV_SANDBOX_MODE) {
        Ok(v) => v.parse().unwrap_or_else(|e| {
            log::warn!("{ENV_SANDBOX_MODE}: {e}; using configuration");
            cfg.sandbox_mode
        }),
        Err(_) => cfg.sandbox_mode,
    }
}

impl System {
    fn new(cfg: &RuntimeConfig) -> Self {
        fault::install();
        let want = cfg.keys.cached.max(1) as usize;
        let mode = requested_mode(cfg);
        if mode != SandboxMode::Portable && sys::cpu_has_pku() {
            match Self::hardware(cfg, want) {
                Ok(s) => return s,
                Err(e) => log::warn!("protection keys unavailable ({e}); using portable sandboxes"),
            }
        } else if mode == SandboxMode::Hardware {
            log::warn!("CPU lacks protection keys; using portable sandboxes");
        }
        Self::portable(cfg, want)
    }

    fn with_slots(mode: Mode, cfg: &RuntimeConfig, keys: &[i32]) -> std::io::Result<Self> {
        let base = alloc::reserve(keys.len())?;
        let slots: Box<[Slot]> = keys
            .iter()
            .enumerate()
            .map(|(i, &key)| Slot {
                key,
                arena: Arena::new(base + i as u64 * alloc::ARENA_SPAN, cfg.arena_size as u64),
            })
            .collect();
        let entries = (0..slots.len())
            .map(|_| Entry {
                range: (0, 0),
                map: Weak::new(),
                busy: false,
                last_used: 0,
            })
            .collect();
        Ok(Self {
            mode,
            slots,
            table: Mutex::new(Table { entries, tick: 0 }),
            idle: Condvar::new(),
            portable: Mutex::new(()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    fn hardware(cfg: &RuntimeConfig, want: usize) -> std::io::Result<Self> {
        let protected = sys::pkey_alloc()?;
        let mut keys = Vec::with_capacity(want);
        while keys.len() < want {
            match sys::pkey_alloc() {
                Ok(k) => keys.push(k),
                Err(_) => break,
            }
        }
        if keys.is_empty() {
            sys::pkey_free(protected);
            return Err(std::io::Error::other("no keys left for sandbox slots"));
        }
        let s = match Self::with_slots(Mode::Hardware, cfg, &keys) {
            Ok(s) => s,
            Err(e) => {
                for k in keys.iter().chain([&protected]) {
                    sys::pkey_free(*k);
                }
                return Err(e);
            }
        };
        let bits = keys.iter().chain([&protected]).fold(0, |b, &k| b | sys::pkru_deny(k));
        fault::set_owned_key_bits(bits);
        for slot in s.slots.iter() {
            let (lo, hi) = slot.arena.range();
            // SAFETY: the arena reservation made above.
            unsafe { sys::pkey_mprotect(lo, (hi - lo) as usize, sys::PROT_NONE, slot.key)? };
        }
        PROTECTED_KEY.store(protected, Ordering::Release);
        for_each_mapping(|m| m.rekey_all(protected));
        for &(lo, hi) in private::regions().iter() {
            // SAFETY: a live private region.
            unsafe { sys::pkey_mprotect(lo, (hi - lo) as usize, sys::PROT_RW, protected)? };
        }
        log::debug!("sandboxes use protection keys: protected {protected}, slots {keys:?}");
        Ok(s)
    }

    fn portable(cfg: &RuntimeConfig, want: usize) -> Self {
        Self::with_slots(Mode::Portable, cfg, &vec![-1; want])
            .unwrap_or_else(|e| panic!("cannot reserve sandbox arenas: {e}"))
    }

    fn lock(&self) -> MutexGuard<'_, Table> {
        self.table.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Claims a slot for `[lo, hi)`, re-keying on a miss. Returns the slot
    /// index and the heap.
    fn acquire(&self, lo: u64, hi: u64) -> Result<(usize, Arc<HeapMapping>), SandboxError> {
        let mut t = self.lock();
        loop {
            t.tick += 1;
            let tick = t.tick;
            if let Some(i) = t.entries.iter().position(|e| e.range == (lo, hi)) {
                if let Some(m) = t.entries[i].map.upgrade() {
                    if !t.entries[i].busy {
                        let e = &mut t.entries[i];
                        e.busy = true;
                        e.last_used = tick;
                        self.hits.fetch_add(1, Ordering::Relaxed);
                        return Ok((i, m));
                    }
                    t = self.idle.wait(t).unwrap_or_else(|e| e.into_inner());
                    continue;
                }
            }
            let map = mapping_containing(lo)
                .filter(|m| m.contains_range(lo, hi - lo))
                .ok_or(SandboxError::NotInHeap { start: lo, len: hi - lo })?;
            let overlaps = |e: &Entry| e.range.0 < hi && lo < e.range.1;
            if t.entries.iter().any(|e| e.busy && overlaps(e)) {
                t = self.idle.wait(t).unwrap_or_else(|e| e.into_inner());
                continue;
            }
            let Some(victim) = t
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| !e.busy)
                .min_by_key(|(_, e)| (!overlaps(e), e.last_used))
                .map(|(i, _)| i)
            else {
                t = self.idle.wait(t).unwrap_or_else(|e| e.into_inner());
                continue;
            };
            for i in 0..t.entries.len() {
                if i == victim || overlaps(&t.entries[i]) {
                    self.evict(&mut t.entries[i]);
                }
            }
            if self.mode == Mode::Hardware {
                map.rekey(lo, hi - lo, self.slots[victim].key)?;
            }
            t.entries[victim] = Entry {
                range: (lo, hi),
                map: Arc::downgrade(&map),
                busy: true,
                last_used: tick,
            };
            self.misses.fetch_add(1, Ordering::Relaxed);
            return Ok((victim, map));
        }
    }

    fn evict(&self, e: &mut Entry) {
        if let (Some(m), Some(key)) = (e.map.upgrade(), protected_key()) {
            if let Err(err) = m.rekey(e.range.0, e.range.1 - e.range.0, key) {
                log::warn!("cannot restore key on {:#x}..{:#x}: {err}", e.range.0, e.range.1);
            }
        }
        e.range = (0, 0);
        e.map = Weak::new();
    }

    fn release(&self, slot: usize) {
        self.lock().entries[slot].busy = false;
        self.idle.notify_all();
    }
}

/// Forgets every idle cached sandbox, so the next entry takes the slow path.
pub fn flush_cache() {
    let s = system();
    let mut t = s.lock();
    for e in t.entries.iter_mut().filter(|e| !e.busy) {
        s.evict(e);
    }
}

fn portable_restrict(allow: (u64, u64)) {
    PORTABLE_GEN.fetch_add(1, Ordering::AcqRel);
    for_each_mapping(|m| {
        let a = if m.contains(allow.0) { allow } else { (0, 0) };
        if let Err(e) = m.portable_restrict(a) {
            log::warn!("cannot restrict heap {}: {e}", m.heap_id());
        }
    });
    for &(lo, hi) in private::regions().iter() {
        // SAFETY: a live private region.
        let _ = unsafe { sys::mprotect(lo, (hi - lo) as usize, sys::PROT_NONE) };
    }
}

fn portable_unrestrict() {
    for_each_mapping(|m| {
        if let Err(e) = m.portable_unrestrict() {
            log::warn!("cannot restore heap {}: {e}", m.heap_id());
        }
    });
    for &(lo, hi) in private::regions().iter() {
        // SAFETY: a live private region.
        let _ = unsafe { sys::mprotect(lo, (hi - lo) as usize, sys::PROT_RW) };
    }
    PORTABLE_GEN.fetch_add(1, Ordering::AcqRel);
    sys::futex_wake(&PORTABLE_GEN, i32::MAX);
}

/// An active sandbox on the current thread. Ends when dropped.
pub struct Sandbox {
    slot: usize,
    range: (u64, u64),
    saved_pkru: u32,
    active: bool,
    vars: Vec<(u64, usize)>,
    portable: Option<MutexGuard<'static, ()>>,
    _map: Arc<HeapMapping>,
    _not_send: PhantomData<*const ()>,
}

impl Sandbox {
    /// Confines the calling thread to `[start, start + len)`, after copying
    /// each of `vars` into the sandbox's arena.
    pub fn begin(start: u64, len: u64, vars: &[&[u8]]) -> Result<Self, SandboxError> {
        let s = system();
        if fault::in_sandbox() {
            return Err(SandboxError::Nested);
        }
        let ps = crate::config::host_page_size() as u64;
        if len == 0 || start % ps != 0 || len % ps != 0 {
            return Err(SandboxError::Unaligned { start, len });
        }
        let end = start.checked_add(len).ok_or(SandboxError::NotInHeap { start, len })?;
        fault::ensure_thread_access();
        let (slot, map) = s.acquire(start, end)?;
        let arena = &s.slots[slot].arena;
        let mut copies = Vec::with_capacity(vars.len());
        for v in vars {
            let p = arena.alloc(v.len(), 16);
            if p.is_null() {
                arena.reset();
                s.release(slot);
                return Err(SandboxError::ArenaFull(v.len()));
            }
            // SAFETY: p has room for v.len() bytes.
            unsafe { std::ptr::copy_nonoverlapping(v.as_ptr(), p, v.len()) };
            copies.push((p as u64, v.len()));
        }
        let allow = [(start, end), arena.range()];
        let mut sb = Self {
            slot,
            range: (start, end),
            saved_pkru: 0,
            active: true,
            vars: copies,
            portable: None,
            _map: map,
            _not_send: PhantomData,
        };
        match s.mode {
            Mode::Hardware => {
                sb.saved_pkru = sys::rdpkru();
                let pkru = (sb.saved_pkru | fault::owned_key_bits()) & !sys::pkru_deny(s.slots[slot].key);
                fault::enter_sandbox_state(fault::SANDBOX_HW, allow);
                alloc::set_current(arena);
                // SAFETY: PKU is present; the new rights keep the stack and
                // the sandbox's own ranges accessible.
                unsafe { sys::wrpkru(pkru) };
            }
            Mode::Portable => {
                sb.portable = Some(s.portable.lock().unwrap_or_else(|e| e.into_inner()));
                portable_restrict((start, end));
                fault::enter_sandbox_state(fault::SANDBOX_PORTABLE, allow);
                alloc::set_current(arena);
            }
        }
        Ok(sb)
    }

    pub fn start(&self) -> u64 {
        self.range.0
    }

    pub fn len(&self) -> u64 {
        self.range.1 - self.range.0
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    /// The arena copy of the `i`th copy-in variable.
    pub fn var(&self, i: usize) -> Option<&[u8]> {
        // SAFETY: the copy lives in the arena until the sandbox ends.
        self.vars
            .get(i)
            .map(|&(p, n)| unsafe { std::slice::from_raw_parts(p as *const u8, n) })
    }

    /// The arena copy of the `i`th copy-in variable, read as a `T`.
    pub fn var_as<T: Copy>(&self, i: usize) -> Option<T> {
        let &(p, n) = self.vars.get(i)?;
        // SAFETY: n bytes at p are readable; read_unaligned needs no alignment.
        (n == std::mem::size_of::<T>()).then(|| unsafe { std::ptr::read_unaligned(p as *const T) })
    }

    /// Bytes allocated in the arena so far.
    pub fn arena_used(&self) -> u64 {
        system().slots[self.slot].arena.used()
    }

    /// Allocates directly from the arena.
    pub fn alloc(&self, size: usize, align: usize) -> Option<*mut u8> {
        let p = system().slots[self.slot].arena.alloc(size, align);
        (!p.is_null()).then_some(p)
    }

    /// Runs `f` inside the sandbox, turning faults into errors.
    ///
    /// The result must not own memory allocated inside the sandbox: it is
    /// discarded when the sandbox ends.
    pub fn run<R: Copy>(&self, f: impl FnOnce(&Self) -> R) -> Result<R, SandboxError> {
        if !self.active {
            return Err(SandboxError::NotActive);
        }
        fault::catch(|| f(self)).map_err(SandboxError::from)
    }

    /// Restores the thread's access and discards the arena.
    pub fn end(&mut self) -> Result<(), SandboxError> {
        if !self.active {
            return Err(SandboxError::NotActive);
        }
        self.active = false;
        let s = system();
        match s.mode {
            Mode::Hardware => {
                // SAFETY: restores the value saved at entry.
                unsafe { sys::wrpkru(self.saved_pkru) };
                alloc::set_current(std::ptr::null());
                fault::leave_sandbox_state();
            }
            Mode::Portable => {
                alloc::set_current(std::ptr::null());
                fault::leave_sandbox_state();
                portable_unrestrict();
                self.portable = None;
            }
        }
        s.slots[self.slot].arena.reset();
        s.release(self.slot);
        Ok(())
    }
}

impl Drop for Sandbox {
    fn drop(&mut self) {
        if self.active {
            let _ = self.end();
        }
    }
}

/// Runs `f` confined to `[start, start + len)` with `vars` copied in.
pub fn run<R: Copy>(
    start: u64,
    len: u64,
    vars: &[&[u8]],
    f: impl FnOnce(&Sandbox) -> R,
) -> Result<R, SandboxError> {
    let mut sb = Sandbox::begin(start, len, vars)?;
    let r = sb.run(f);
    sb.end()?;
    r
}

#[cfg(test)]
mod tests;
