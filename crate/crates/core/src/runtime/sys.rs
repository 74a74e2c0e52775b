//! Thin wrappers over the Linux calls the runtime depends on.

use std::io;
use std::os::fd::RawFd;
use std::sync::atomic::AtomicU32;
use std::time::Duration;

pub const MAP_FIXED_NOREPLACE: libc::c_int = 0x100000;
pub const SEGV_PKUERR: libc::c_int = 4;
const PR_SET_TIMERSLACK: libc::c_int = 29;

pub const PROT_NONE: i32 = libc::PROT_NONE;
pub const PROT_READ: i32 = libc::PROT_READ;
pub const PROT_RW: i32 = libc::PROT_READ | libc::PROT_WRITE;

fn check(ret: libc::c_long) -> io::Result<libc::c_long> {
    if ret < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(ret)
    }
}

/// Maps `len` bytes at exactly `addr`, failing with `AddrInUse` if anything
/// already occupies the range.
pub fn mmap_fixed(addr: u64, len: usize, prot: i32, flags: i32, fd: RawFd) -> io::Result<*mut u8> {
    // SAFETY: MAP_FIXED_NOREPLACE never replaces existing mappings.
    let p = unsafe {
        libc::mmap(
            addr as *mut libc::c_void,
            len,
            prot,
            flags | MAP_FIXED_NOREPLACE,
            fd,
            0,
        )
    };
    if p == libc::MAP_FAILED {
        let e = io::Error::last_os_error();
        if e.raw_os_error() == Some(libc::EEXIST) {
            return Err(io::Error::new(io::ErrorKind::AddrInUse, e));
        }
        return Err(e);
    }
    if p as u64 != addr {
        // Kernels without MAP_FIXED_NOREPLACE treat the address as a hint.
        // SAFETY: p/len is the mapping just created.
        unsafe { libc::munmap(p, len) };
        return Err(io::Error::new(
            io::ErrorKind::AddrInUse,
            format!("kernel placed mapping at {p:p} instead of {addr:#x}"),
        ));
    }
    Ok(p as *mut u8)
}

/// Anywhere mapping, used for aliases and private scratch space.
pub fn mmap_any(len: usize, prot: i32, flags: i32, fd: RawFd) -> io::Result<*mut u8> {
    // SAFETY: kernel-chosen address.
    let p = unsafe { libc::mmap(std::ptr::null_mut(), len, prot, flags, fd, 0) };
    if p == libc::MAP_FAILED {
        return Err(io::Error::last_os_error());
    }
    Ok(p as *mut u8)
}

/// # Safety
/// `addr..addr+len` must be a mapping owned by the caller and no longer used.
pub unsafe fn munmap(addr: *mut u8, len: usize) {
    libc::munmap(addr as *mut libc::c_void, len);
}

/// # Safety
/// Changing protection can make live references fault.
pub unsafe fn mprotect(addr: u64, len: usize, prot: i32) -> io::Result<()> {
    if libc::mprotect(addr as *mut libc::c_void, len, prot) != 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

pub fn memfd(name: &str, len: u64) -> io::Result<RawFd> {
    let cname = std::ffi::CString::new(name).unwrap();
    // SAFETY: valid C string.
    let fd = unsafe { libc::memfd_create(cname.as_ptr(), libc::MFD_CLOEXEC) };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    // SAFETY: fd is ours.
    if unsafe { libc::ftruncate(fd, len as libc::off_t) } != 0 {
        let e = io::Error::last_os_error();
        unsafe { libc::close(fd) };
        return Err(e);
    }
    Ok(fd)
}

pub fn pkey_alloc() -> io::Result<i32> {
    // SAFETY: plain syscall.
    check(unsafe { libc::syscall(libc::SYS_pkey_alloc, 0u64, 0u64) }).map(|k| k as i32)
}

pub fn pkey_free(key: i32) {
    // SAFETY: plain syscall.
    unsafe { libc::syscall(libc::SYS_pkey_free, key as u64) };
}

/// # Safety
/// See [`mprotect`].
pub unsafe fn pkey_mprotect(addr: u64, len: usize, prot: i32, key: i32) -> io::Result<()> {
    check(libc::syscall(
        libc::SYS_pkey_mprotect,
        addr,
        len as u64,
        prot as u64,
        key as u64,
    ))
    .map(|_| ())
}

#[cfg(target_arch = "x86_64")]
pub fn cpu_has_pku() -> bool {
    let r = core::arch::x86_64::__cpuid_count(7, 0);
    // PKU and OSPKE: supported and enabled by the kernel.
    r.ecx & (1 << 3) != 0 && r.ecx & (1 << 4) != 0
}

#[cfg(not(target_arch = "x86_64"))]
pub fn cpu_has_pku() -> bool {
    false
}

/// Offset of the PKRU component inside the XSAVE area.
#[cfg(target_arch = "x86_64")]
pub fn xsave_pkru_offset() -> usize {
    core::arch::x86_64::__cpuid_count(0xD, 9).ebx as usize
}

#[cfg(not(target_arch = "x86_64"))]
pub fn xsave_pkru_offset() -> usize {
    0
}

#[cfg(target_arch = "x86_64")]
#[inline(always)]
pub fn rdpkru() -> u32 {
    let eax: u32;
    // SAFETY: only called once PKU support has been confirmed.
    unsafe {
        core::arch::asm!("rdpkru", in("ecx") 0u32, out("eax") eax, out("edx") _,
            options(nomem, nostack, preserves_flags));
    }
    eax
}

#[cfg(target_arch = "x86_64")]
#[inline(always)]
/// # Safety
/// The CPU must support PKU, and the new rights must not revoke access to
/// memory the caller still needs.
pub unsafe fn wrpkru(v: u32) {
    core::arch::asm!("wrpkru", in("eax") v, in("ecx") 0u32, in("edx") 0u32,
        options(nostack, preserves_flags));
}

#[cfg(not(target_arch = "x86_64"))]
pub fn rdpkru() -> u32 {
    0
}

#[cfg(not(target_arch = "x86_64"))]
pub unsafe fn wrpkru(_v: u32) {}

/// PKRU bits denying all access through `key`.
pub const fn pkru_deny(key: i32) -> u32 {
    0b11 << (2 * key as u32)
}

/// Blocks while `word` holds `expected`, or until `timeout`.
pub fn futex_wait(word: &AtomicU32, expected: u32, timeout: Option<Duration>) {
    let ts = timeout.map(|t| libc::timespec {
        tv_sec: t.as_secs() as libc::time_t,
        tv_nsec: t.subsec_nanos() as libc::c_long,
    });
    let tsp = ts
        .as_ref()
        .map_or(std::ptr::null(), |t| t as *const libc::timespec);
    // SAFETY: word is a valid aligned u32 for the duration of the call.
    unsafe {
        libc::syscall(
            libc::SYS_futex,
            word.as_ptr(),
            libc::FUTEX_WAIT | libc::FUTEX_PRIVATE_FLAG,
            expected,
            tsp,
        );
    }
}

pub fn futex_wake(word: &AtomicU32, n: i32) {
    // SAFETY: as above.
    unsafe {
        libc::syscall(
            libc::SYS_futex,
            word.as_ptr(),
            libc::FUTEX_WAKE | libc::FUTEX_PRIVATE_FLAG,
            n,
        );
    }
}

/// Lowers the calling thread's timer slack so short sleeps stay short.
pub fn set_timer_slack(ns: u64) {
    // SAFETY: prctl with scalar arguments.
    unsafe { libc::prctl(PR_SET_TIMERSLACK, ns as libc::c_ulong, 0, 0, 0) };
}

pub fn process_cpu_time() -> Duration {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: ts is a valid out pointer.
    unsafe { libc::clock_gettime(libc::CLOCK_PROCESS_CPUTIME_ID, &mut ts) };
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

pub fn online_cpus() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn gettid() -> u32 {
    // SAFETY: no arguments.
    unsafe { libc::syscall(libc::SYS_gettid) as u32 }
}
