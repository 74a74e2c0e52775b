//! Memory-fault handling shared by seals, sandboxes and the page-migration
//! fallback.
//!
//! One SIGSEGV/SIGBUS handler serves the whole process. In order it:
//!
//! 1. grants a thread that predates a protection key access to it (threads
//!    created before `pkey_alloc` start with the key denied);
//! 2. turns any access by a sandboxed thread outside its allowed ranges into
//!    a sandbox violation;
//! 3. for pages of registered regions, retries spurious faults and hands
//!    missing fallback pages to the region's resolver, blocking the faulting
//!    thread until the page is installed;
//! 4. unwinds to the innermost [`catch`] point, if one is armed;
//! 5. otherwise defers to the previously installed handler.
//!
//! Unwinding uses `siglongjmp`, so Rust frames between the fault and the
//! catch point are not dropped. Code run under [`catch`] must not hold locks
//! or own resources it expects to be released.
//!
//! The handler runs with the kernel's initial PKRU value, which denies every
//! non-zero key, so it only touches statics, thread-locals and the private
//! allocator's memory.

use std::cell::Cell;
use std::os::fd::RawFd;
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::atomic::{
    AtomicBool, AtomicPtr, AtomicU32, AtomicU64, AtomicU8, AtomicUsize, Ordering,
};
use std::sync::Once;
use std::time::Duration;

use super::sys;

extern "C" {
    fn rpcool_catch(body: extern "C" fn(*mut libc::c_void), ctx: *mut libc::c_void) -> libc::c_int;
    fn rpcool_is_armed() -> libc::c_int;
    fn rpcool_unwind();
}

/// Per-page permission bits as the runtime intends them.
pub mod perm {
    pub const NONE: u8 = 0;
    pub const READ: u8 = 1;
    pub const RW: u8 = 3;
    pub const PROT_MASK: u8 = 3;
    /// Sealed by this process: writes are genuine violations.
    pub const LOCAL_SEAL: u8 = 0x10;
    /// Read-only copy of a page owned by the peer.
    pub const REMOTE_COPY: u8 = 0x20;
    /// Owned by the peer and not present locally.
    pub const ABSENT: u8 = 0x40;

    pub fn to_prot(p: u8) -> i32 {
        match p & PROT_MASK {
            0 => libc::PROT_NONE,
            1 => libc::PROT_READ,
            _ => libc::PROT_READ | libc::PROT_WRITE,
        }
    }

    pub fn allows(p: u8, write: bool) -> bool {
        if write {
            p & PROT_MASK == RW
        } else {
            p & READ != 0
        }
    }
}

/// Why a [`catch`] region was abandoned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// A sandboxed thread touched memory outside its sandbox.
    SandboxViolation,
    /// Any other invalid access, such as a write to a sealed page.
    Access,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub addr: u64,
    pub signal: i32,
    pub code: i32,
    pub write: bool,
    pub kind: FaultKind,
}

impl std::fmt::Display for Fault {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let what = match self.kind {
            FaultKind::SandboxViolation => "sandbox violation",
            FaultKind::Access => "invalid access",
        };
        let rw = if self.write { "write" } else { "read" };
        write!(
            f,
            "{what}: {rw} at {:#x} (signal {}, code {})",
            self.addr, self.signal, self.code
        )
    }
}

/// Blocking page resolver used by the fallback transport.
///
/// The faulting thread writes `page | write << 63` to `pipe_wr` and waits on
/// `gens[page]` until the driver bumps it. Once `dead` is set, faults are no
/// longer resolved and unwind like any other access error.
pub(crate) struct Resolver {
    pub pipe_wr: RawFd,
    pub gens: Box<[AtomicU32]>,
    pub dead: AtomicBool,
}

impl Drop for Resolver {
    fn drop(&mut self) {
        // SAFETY: the resolver owns its end of the pipe.
        unsafe { libc::close(self.pipe_wr) };
    }
}

pub(crate) const REQ_WRITE: u64 = 1 << 63;

struct RegionSlot {
    lo: AtomicU64,
    hi: AtomicU64,
    page_shift: AtomicU32,
    perms: AtomicPtr<AtomicU8>,
    resolver: AtomicPtr<Resolver>,
}

const MAX_REGIONS: usize = 256;

#[allow(clippy::declare_interior_mutable_const)]
const EMPTY_SLOT: RegionSlot = RegionSlot {
    lo: AtomicU64::new(0),
    hi: AtomicU64::new(0),
    page_shift: AtomicU32::new(12),
    perms: AtomicPtr::new(ptr::null_mut()),
    resolver: AtomicPtr::new(ptr::null_mut()),
};

static REGIONS: [RegionSlot; MAX_REGIONS] = [EMPTY_SLOT; MAX_REGIONS];
static REGION_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());

/// PKRU bits of every key this process allocated.
static OWNED_KEY_BITS: AtomicU32 = AtomicU32::new(0);
static PKRU_OFFSET: AtomicUsize = AtomicUsize::new(0);
/// Odd while a portable-mode sandbox has other memory revoked.
pub(crate) static PORTABLE_GEN: AtomicU32 = AtomicU32::new(0);

static OLD_SEGV: AtomicPtr<libc::sigaction> = AtomicPtr::new(ptr::null_mut());
static OLD_BUS: AtomicPtr<libc::sigaction> = AtomicPtr::new(ptr::null_mut());

const SANDBOX_NONE: u8 = 0;
pub(crate) const SANDBOX_HW: u8 = 1;
pub(crate) const SANDBOX_PORTABLE: u8 = 2;

thread_local! {
    static SANDBOX: Cell<u8> = const { Cell::new(SANDBOX_NONE) };
    static ALLOW: [Cell<(u64, u64)>; 2] = const { [Cell::new((0, 0)), Cell::new((0, 0))] };
    static LAST: Cell<Option<Fault>> = const { Cell::new(None) };
    static SPURIOUS: Cell<(u64, u32)> = const { Cell::new((0, 0)) };
}

/// A registered region; unregisters itself when dropped.
pub(crate) struct RegionHandle(usize);

impl Drop for RegionHandle {
    fn drop(&mut self) {
        let _g = REGION_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        let s = &REGIONS[self.0];
        s.hi.store(0, Ordering::SeqCst);
        s.lo.store(0, Ordering::SeqCst);
        s.perms.store(ptr::null_mut(), Ordering::SeqCst);
        s.resolver.store(ptr::null_mut(), Ordering::SeqCst);
    }
}

/// Registers `[lo, hi)` with its per-page permission array so the handler
/// can tell intended accesses from violations.
///
/// # Safety
/// `perms` must hold one entry per page and, like `resolver`, stay valid
/// until the handle is dropped.
pub(crate) unsafe fn register_region(
    lo: u64,
    hi: u64,
    page_shift: u32,
    perms: *const AtomicU8,
    resolver: *const Resolver,
) -> Option<RegionHandle> {
    install();
    let _g = REGION_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    for (i, s) in REGIONS.iter().enumerate() {
        if s.hi.load(Ordering::SeqCst) == 0 {
            s.page_shift.store(page_shift, Ordering::SeqCst);
            s.perms.store(perms as *mut AtomicU8, Ordering::SeqCst);
            s.resolver
                .store(resolver as *mut Resolver, Ordering::SeqCst);
            s.lo.store(lo, Ordering::SeqCst);
            s.hi.store(hi, Ordering::SeqCst);
            return Some(RegionHandle(i));
        }
    }
    None
}

pub(crate) fn set_owned_key_bits(bits: u32) {
    OWNED_KEY_BITS.store(bits, Ordering::SeqCst);
    PKRU_OFFSET.store(sys::xsave_pkru_offset(), Ordering::SeqCst);
}

pub(crate) fn owned_key_bits() -> u32 {
    OWNED_KEY_BITS.load(Ordering::Relaxed)
}

/// Opens every runtime key for the calling thread.
///
/// Called at API entry points; the fault handler does the same lazily.
#[inline]
pub fn ensure_thread_access() {
    let bits = OWNED_KEY_BITS.load(Ordering::Relaxed);
    if bits == 0 || in_sandbox() {
        return;
    }
    let cur = sys::rdpkru();
    if cur & bits != 0 {
        // SAFETY: PKU is present (keys were allocated); this only widens access.
        unsafe { sys::wrpkru(cur & !bits) };
    }
}

pub(crate) fn enter_sandbox_state(mode: u8, allow: [(u64, u64); 2]) {
    ALLOW.with(|a| {
        a[0].set(allow[0]);
        a[1].set(allow[1]);
    });
    SANDBOX.with(|s| s.set(mode));
}

pub(crate) fn leave_sandbox_state() {
    SANDBOX.with(|s| s.set(SANDBOX_NONE));
    ALLOW.with(|a| {
        a[0].set((0, 0));
        a[1].set((0, 0));
    });
}

pub fn in_sandbox() -> bool {
    SANDBOX.with(|s| s.get()) != SANDBOX_NONE
}

/// Installs the process-wide handler. Idempotent.
pub fn install() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        for (sig, slot) in [(libc::SIGSEGV, &OLD_SEGV), (libc::SIGBUS, &OLD_BUS)] {
            // SAFETY: sigaction with a fully initialised struct.
            unsafe {
                let mut sa: libc::sigaction = std::mem::zeroed();
                sa.sa_sigaction = handler as *const () as usize;
                sa.sa_flags = libc::SA_SIGINFO | libc::SA_ONSTACK | libc::SA_NODEFER;
                libc::sigemptyset(&mut sa.sa_mask);
                let old = Box::into_raw(Box::new(std::mem::zeroed::<libc::sigaction>()));
                if libc::sigaction(sig, &sa, old) != 0 {
                    panic!(
                        "cannot install fault handler: {}",
                        std::io::Error::last_os_error()
                    );
                }
                slot.store(old, Ordering::SeqCst);
            }
        }
    });
}

/// Runs `f`, converting a memory fault inside it into `Err`.
///
/// See the module documentation for what is skipped on a fault.
pub fn catch<R, F: FnOnce() -> R>(f: F) -> Result<R, Fault> {
    install();
    struct Ctx<F, R> {
        f: Option<F>,
        out: Option<std::thread::Result<R>>,
    }
    extern "C" fn tramp<F: FnOnce() -> R, R>(p: *mut libc::c_void) {
        // SAFETY: p is the Ctx passed below, alive for the whole call.
        let ctx = unsafe { &mut *(p as *mut Ctx<F, R>) };
        let f = ctx.f.take().unwrap();
        ctx.out = Some(catch_unwind(AssertUnwindSafe(f)));
    }
    let keys = OWNED_KEY_BITS.load(Ordering::Relaxed);
    let saved_pkru = if keys != 0 { sys::rdpkru() } else { 0 };
    LAST.with(|l| l.set(None));
    let mut ctx = Ctx {
        f: Some(f),
        out: None,
    };
    // SAFETY: the trampoline matches the C signature and ctx outlives the call.
    let rc = unsafe {
        rpcool_catch(
            tramp::<F, R>,
            &mut ctx as *mut Ctx<F, R> as *mut libc::c_void,
        )
    };
    if rc != 0 {
        if keys != 0 {
            // Signal delivery reset PKRU; put back what the caller had.
            // SAFETY: restores a value this thread held a moment ago.
            unsafe { sys::wrpkru(saved_pkru) };
        }
        let fault = LAST.with(|l| l.take()).unwrap_or(Fault {
            addr: 0,
            signal: libc::SIGSEGV,
            code: 0,
            write: false,
            kind: FaultKind::Access,
        });
        return Err(fault);
    }
    match ctx.out.take().expect("body ran") {
        Ok(r) => Ok(r),
        Err(p) => resume_unwind(p),
    }
}

fn lookup(addr: u64) -> Option<&'static RegionSlot> {
    REGIONS.iter().find(|s| {
        let hi = s.hi.load(Ordering::Acquire);
        hi != 0 && addr < hi && addr >= s.lo.load(Ordering::Acquire)
    })
}

fn allowed_by_sandbox(addr: u64) -> bool {
    ALLOW.with(|a| {
        a.iter().any(|c| {
            let (lo, hi) = c.get();
            addr >= lo && addr < hi
        })
    })
}

/// Re-enables this process's keys in the interrupted context's saved PKRU.
///
/// # Safety
/// `uc` must be the ucontext passed to the signal handler.
#[cfg(target_arch = "x86_64")]
unsafe fn open_keys_in_frame(uc: *mut libc::ucontext_t) -> bool {
    let bits = OWNED_KEY_BITS.load(Ordering::Relaxed);
    let off = PKRU_OFFSET.load(Ordering::Relaxed);
    if bits == 0 || off == 0 || uc.is_null() {
        return false;
    }
    let fp = (*uc).uc_mcontext.fpregs as *mut u8;
    if fp.is_null() {
        return false;
    }
    let xstate_bv = fp.add(512) as *mut u64;
    let pkru = fp.add(off) as *mut u32;
    if ptr::read_volatile(xstate_bv) & (1 << 9) == 0 {
        return false;
    }
    let cur = ptr::read_volatile(pkru);
    if cur & bits == 0 {
        return false;
    }
    ptr::write_volatile(pkru, cur & !bits);
    true
}

#[cfg(not(target_arch = "x86_64"))]
unsafe fn open_keys_in_frame(_uc: *mut libc::ucontext_t) -> bool {
    false
}

#[cfg(target_arch = "x86_64")]
unsafe fn is_write(uc: *mut libc::ucontext_t) -> bool {
    !uc.is_null() && (*uc).uc_mcontext.gregs[libc::REG_ERR as usize] & 2 != 0
}

#[cfg(not(target_arch = "x86_64"))]
unsafe fn is_write(_uc: *mut libc::ucontext_t) -> bool {
    false
}

/// Blocks until the page is installed. False if the resolver is gone.
fn resolve(r: &Resolver, page: usize, perms: &AtomicU8, write: bool) -> bool {
    let gen = r.gens[page].load(Ordering::Acquire);
    if perm::allows(perms.load(Ordering::Acquire), write) {
        return true;
    }
    if r.dead.load(Ordering::Acquire) {
        return false;
    }
    let req = page as u64 | if write { REQ_WRITE } else { 0 };
    let bytes = req.to_le_bytes();
    // SAFETY: write(2) is async-signal-safe; bytes is a local array.
    let n = unsafe { libc::write(r.pipe_wr, bytes.as_ptr() as *const libc::c_void, 8) };
    if n != 8 {
        return false;
    }
    loop {
        sys::futex_wait(&r.gens[page], gen, Some(Duration::from_millis(50)));
        if r.gens[page].load(Ordering::Acquire) != gen
            || perm::allows(perms.load(Ordering::Acquire), write)
        {
            return true;
        }
        if r.dead.load(Ordering::Acquire) {
            return false;
        }
    }
}

unsafe fn record_and_unwind(f: Fault) -> bool {
    if rpcool_is_armed() == 0 {
        return false;
    }
    LAST.with(|l| l.set(Some(f)));
    rpcool_unwind();
    false
}

unsafe fn chain(sig: i32, info: *mut libc::siginfo_t, uc: *mut libc::c_void) {
    let slot = if sig == libc::SIGBUS {
        &OLD_BUS
    } else {
        &OLD_SEGV
    };
    let old = slot.load(Ordering::SeqCst);
    if !old.is_null() {
        let h = (*old).sa_sigaction;
        if h != libc::SIG_DFL && h != libc::SIG_IGN {
            if (*old).sa_flags & libc::SA_SIGINFO != 0 {
                let f: extern "C" fn(i32, *mut libc::siginfo_t, *mut libc::c_void) =
                    std::mem::transmute(h);
                f(sig, info, uc);
            } else {
                let f: extern "C" fn(i32) = std::mem::transmute(h);
                f(sig);
            }
            return;
        }
    }
    // Fall back to the default action: the access repeats and kills us.
    let mut sa: libc::sigaction = std::mem::zeroed();
    sa.sa_sigaction = libc::SIG_DFL;
    libc::sigaction(sig, &sa, ptr::null_mut());
}

extern "C" fn handler(sig: i32, info: *mut libc::siginfo_t, uc: *mut libc::c_void) {
    // SAFETY: arguments come from the kernel.
    unsafe {
        let ucp = uc as *mut libc::ucontext_t;
        let addr = (*info).si_addr() as u64;
        let code = (*info).si_code;
        let write = sig == libc::SIGSEGV && is_write(ucp);
        let sandbox = SANDBOX.with(|s| s.get());
        let mut fault = Fault {
            addr,
            signal: sig,
            code,
            write,
            kind: FaultKind::Access,
        };

        if sig == libc::SIGSEGV && code == sys::SEGV_PKUERR {
            if sandbox != SANDBOX_HW && open_keys_in_frame(ucp) {
                return;
            }
            if sandbox == SANDBOX_HW {
                fault.kind = FaultKind::SandboxViolation;
            }
        }
        if sandbox != SANDBOX_NONE && !allowed_by_sandbox(addr) {
            fault.kind = FaultKind::SandboxViolation;
        }

        if sig == libc::SIGSEGV && fault.kind == FaultKind::Access {
            if let Some(slot) = lookup(addr) {
                let perms = slot.perms.load(Ordering::Acquire);
                let lo = slot.lo.load(Ordering::Acquire);
                let page = ((addr - lo) >> slot.page_shift.load(Ordering::Relaxed)) as usize;
                if !perms.is_null() {
                    let p = &*perms.add(page);
                    let bits = p.load(Ordering::Acquire);
                    if perm::allows(bits, write) {
                        // Intended access that raced with a protection change
                        // or hit memory a portable sandbox has revoked.
                        let (last, n) = SPURIOUS.with(|s| s.get());
                        let n = if last == addr { n + 1 } else { 1 };
                        SPURIOUS.with(|s| s.set((addr, n)));
                        if n < 100_000 {
                            let g = PORTABLE_GEN.load(Ordering::Acquire);
                            if g & 1 == 1 && sandbox == SANDBOX_NONE {
                                sys::futex_wait(&PORTABLE_GEN, g, Some(Duration::from_millis(10)));
                            }
                            return;
                        }
                    } else {
                        let r = slot.resolver.load(Ordering::Acquire);
                        // A write to a page this process sealed is a real
                        // violation even while a fallback peer holds it.
                        if !r.is_null() && !(write && bits & perm::LOCAL_SEAL != 0) {
                            if resolve(&*r, page, p, write) {
                                return;
                            }
                        }
                    }
                }
            }
        }

        record_and_unwind(fault);
        chain(sig, info, uc);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catch_passes_values_through() {
        assert_eq!(catch(|| 41 + 1), Ok(42));
    }

    #[test]
    fn catch_reports_null_read() {
        let err = catch(|| unsafe { ptr::read_volatile(16 as *const u64) }).unwrap_err();
        assert_eq!(err.addr, 16);
        assert!(!err.write);
        assert_eq!(err.kind, FaultKind::Access);
    }

    #[test]
    fn catch_reports_write_to_read_only_page() {
        let p = sys::mmap_any(
            4096,
            sys::PROT_READ,
            libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
            -1,
        )
        .unwrap();
        let err = catch(|| unsafe { ptr::write_volatile(p.add(8), 1u8) }).unwrap_err();
        assert_eq!(err.addr, p as u64 + 8);
        assert!(err.write);
        unsafe { sys::munmap(p, 4096) };
    }

    #[test]
    fn nested_catch_unwinds_innermost() {
        let outer = catch(|| {
            let inner = catch(|| unsafe { ptr::read_volatile(8 as *const u8) });
            assert!(inner.is_err());
            7
        });
        assert_eq!(outer, Ok(7));
    }

    #[test]
    #[should_panic(expected = "boom")]
    fn panics_propagate() {
        let _ = catch(|| panic!("boom"));
    }

    #[test]
    fn registered_region_retries_intended_access() {
        let p = sys::mmap_any(
            2 * 4096,
            sys::PROT_NONE,
            libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
            -1,
        )
        .unwrap();
        let perms: Vec<AtomicU8> = vec![AtomicU8::new(perm::RW), AtomicU8::new(perm::NONE)];
        let h =
            unsafe { register_region(p as u64, p as u64 + 8192, 12, perms.as_ptr(), ptr::null()) }
                .unwrap();
        // Page 0 is intended RW: make it so from another thread shortly after
        // the fault, which the handler treats as a retry.
        let addr = p as u64;
        let t = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(20));
            unsafe { sys::mprotect(addr, 4096, sys::PROT_RW).unwrap() };
        });
        unsafe { ptr::write_volatile(p, 5u8) };
        t.join().unwrap();
        assert_eq!(unsafe { *p }, 5);
        // Page 1 is intended inaccessible.
        assert!(catch(|| unsafe { ptr::read_volatile(p.add(4096)) }).is_err());
        drop(h);
        unsafe { sys::munmap(p, 8192) };
    }
}
