//! Seals: a sender gives up write access to a range of its heap for the
//! duration of an RPC, so the receiver can use the data in place without a
//! defensive copy.
//!
//! The flow for one call:
//!
//! 1. the sender seals the argument's pages ([`SealRing::seal`]): they become
//!    read-only in the sender, and a descriptor is published in a ring that
//!    the sender itself can only read;
//! 2. the sender sends the call with the descriptor index and epoch;
//! 3. the receiver checks the descriptor with [`SealRing::is_sealed`] and
//!    processes the call;
//! 4. the receiver marks the descriptor complete ([`SealRing::mark_complete`]);
//! 5. the sender releases the seal ([`SealRing::release`]), which is refused
//!    until the receiver has marked it complete.
//!
//! Descriptors are 32 bytes: `start u64, len u64, state u8, pad [u8; 7],
//! epoch u64`, little endian. The sender writes them through the runtime's
//! privileged alias.

mod pool;

pub use pool::ScopePool;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex};

use crate::heap::{HeapError, SharedHeap, PAGE};
use crate::runtime::fault::{ensure_thread_access, perm};
use crate::runtime::HeapMapping;
use crate::sandbox::PrivateRegion;

pub const DESCRIPTOR_SIZE: u64 = 32;
pub const DEFAULT_CAPACITY: u32 = 4096;

pub const STATE_FREE: u8 = 0;
pub const STATE_SEALED: u8 = 1;
pub const STATE_COMPLETED: u8 = 2;
pub const STATE_RELEASED: u8 = 3;

#[repr(C)]
struct Descriptor {
    start: AtomicU64,
    len: AtomicU64,
    state: AtomicU8,
    _pad: [u8; 7],
    epoch: AtomicU64,
}

const _: () = assert!(std::mem::size_of::<Descriptor>() == DESCRIPTOR_SIZE as usize);

/// Identifies one seal: ring slot plus the epoch it was created in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SealToken {
    pub index: u32,
    pub epoch: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Sender,
    Receiver,
}

#[derive(Debug, thiserror::Error)]
pub enum SealError {
    #[error("empty range")]
    Empty,
    #[error("range {start:#x}+{len:#x} is not whole pages")]
    Unaligned { start: u64, len: u64 },
    #[error("range {start:#x}+{len:#x} is outside the heap")]
    OutOfHeap { start: u64, len: u64 },
    #[error("range overlaps active seal {0}")]
    Overlap(u32),
    #[error("descriptor ring is full")]
    RingFull,
    #[error("seal {index} is {state}, expected {expected}")]
    WrongState {
        index: u32,
        state: &'static str,
        expected: &'static str,
    },
    #[error("seal {0} belongs to an earlier epoch")]
    Stale(u32),
    #[error("index {0} is outside the ring")]
    BadIndex(u32),
    #[error("only the {0:?} side may do this")]
    WrongRole(Role),
    #[error(transparent)]
    Heap(#[from] HeapError),
    #[error("changing page protection: {0}")]
    Io(#[from] std::io::Error),
}

pub fn state_name(s: u8) -> &'static str {
    match s {
        STATE_FREE => "free",
        STATE_SEALED => "sealed",
        STATE_COMPLETED => "completed",
        STATE_RELEASED => "released",
        _ => "corrupt",
    }
}

#[derive(Default)]
struct SenderState {
    /// Active seals: start -> (end, index).
    active: BTreeMap<u64, (u64, u32)>,
    next: u32,
}

/// Plain copy of one descriptor, as carried by the fallback transport.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DescriptorImage {
    pub index: u32,
    pub start: u64,
    pub len: u64,
    pub state: u8,
    pub epoch: u64,
}

/// One side's handle on a descriptor ring.
///
/// Over shared memory the ring lives in the connection heap. Over the
/// fallback transport each side keeps a private copy and the two are kept in
/// step with descriptor images.
pub struct SealRing {
    map: Arc<HeapMapping>,
    addr: u64,
    capacity: u32,
    role: Role,
    sender: Mutex<SenderState>,
    local: Option<PrivateRegion>,
}

impl SealRing {
    /// Allocates a ring in `heap` and opens it as the sender.
    pub fn create(heap: &SharedHeap, capacity: u32) -> Result<Self, SealError> {
        let bytes = (capacity as u64 * DESCRIPTOR_SIZE).next_multiple_of(PAGE);
        let addr = heap.alloc(bytes, PAGE)?;
        let map = heap.mapping().clone();
        // SAFETY: a fresh run of `bytes` bytes in the heap.
        unsafe { std::ptr::write_bytes(map.alias_of(addr), 0, bytes as usize) };
        Self::open(map, addr, capacity, Role::Sender)
    }

    /// Opens an existing ring. The sender's view of it becomes read-only.
    pub fn open(map: Arc<HeapMapping>, addr: u64, capacity: u32, role: Role) -> Result<Self, SealError> {
        let bytes = (capacity as u64 * DESCRIPTOR_SIZE).next_multiple_of(PAGE);
        if capacity == 0 || addr % PAGE != 0 || !map.contains_range(addr, bytes) {
            return Err(SealError::OutOfHeap { start: addr, len: bytes });
        }
        if role == Role::Sender {
            map.set_range_permission(addr, bytes, perm::READ | perm::LOCAL_SEAL)?;
        }
        Ok(Self {
            map,
            addr,
            capacity,
            role,
            sender: Mutex::new(SenderState::default()),
            local: None,
        })
    }

    /// A ring kept in private memory, for seals on `map` over the fallback
    /// transport.
    pub fn local(map: Arc<HeapMapping>, capacity: u32, role: Role) -> Result<Self, SealError> {
        if capacity == 0 {
            return Err(SealError::BadIndex(0));
        }
        let region = PrivateRegion::new((capacity as u64 * DESCRIPTOR_SIZE) as usize)?;
        Ok(Self {
            map,
            addr: region.addr(),
            capacity,
            role,
            sender: Mutex::new(SenderState::default()),
            local: Some(region),
        })
    }

    pub fn is_local(&self) -> bool {
        self.local.is_some()
    }

    pub fn image(&self, index: u32) -> Option<DescriptorImage> {
        let d = self.desc(index).ok()?;
        ensure_thread_access();
        Some(DescriptorImage {
            index,
            start: d.start.load(Ordering::Relaxed),
            len: d.len.load(Ordering::Relaxed),
            state: d.state.load(Ordering::Acquire),
            epoch: d.epoch.load(Ordering::Acquire),
        })
    }

    /// Applies a descriptor image from the peer. The receiver accepts new
    /// seals; the sender accepts only completion of a seal it holds.
    pub(crate) fn apply_image(&self, img: DescriptorImage) -> Result<(), SealError> {
        let d = self.desc_mut(img.index)?;
        match self.role {
            Role::Receiver if img.state == STATE_SEALED => {
                d.state.store(STATE_FREE, Ordering::Release);
                d.start.store(img.start, Ordering::Relaxed);
                d.len.store(img.len, Ordering::Relaxed);
                d.epoch.store(img.epoch, Ordering::Relaxed);
                d.state.store(STATE_SEALED, Ordering::Release);
                Ok(())
            }
            Role::Sender if img.state == STATE_COMPLETED => {
                if d.epoch.load(Ordering::Acquire) != img.epoch {
                    return Err(SealError::Stale(img.index));
                }
                d.state
                    .compare_exchange(STATE_SEALED, STATE_COMPLETED, Ordering::AcqRel, Ordering::Acquire)
                    .map(|_| ())
                    .map_err(|s| SealError::WrongState {
                        index: img.index,
                        state: state_name(s),
                        expected: "sealed",
                    })
            }
            _ => Err(SealError::WrongRole(self.role)),
        }
    }

    pub fn addr(&self) -> u64 {
        self.addr
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn mapping(&self) -> &Arc<HeapMapping> {
        &self.map
    }

    fn desc(&self, index: u32) -> Result<&Descriptor, SealError> {
        if index >= self.capacity {
            return Err(SealError::BadIndex(index));
        }
        // SAFETY: inside the ring, which lives as long as the mapping.
        Ok(unsafe { &*((self.addr + index as u64 * DESCRIPTOR_SIZE) as *const Descriptor) })
    }

    /// The descriptor as a writer sees it: the alias when this process's
    /// fixed view of the ring is read-only.
    fn desc_mut(&self, index: u32) -> Result<&Descriptor, SealError> {
        let d = self.desc(index)?;
        let at = d as *const Descriptor as u64;
        if self.local.is_some() || perm::allows(self.map.perm(self.map.page_of(at)), true) {
            return Ok(d);
        }
        // SAFETY: the alias maps the same bytes read-write.
        Ok(unsafe { &*(self.map.alias_of(at) as *const Descriptor) })
    }

    fn sender_only(&self) -> Result<(), SealError> {
        match self.role {
            Role::Sender => Ok(()),
            Role::Receiver => Err(SealError::WrongRole(Role::Sender)),
        }
    }

    fn check_range(&self, start: u64, len: u64) -> Result<(), SealError> {
        if len == 0 {
            return Err(SealError::Empty);
        }
        if start % PAGE != 0 || len % PAGE != 0 {
            return Err(SealError::Unaligned { start, len });
        }
        if !self.map.contains_range(start, len) {
            return Err(SealError::OutOfHeap { start, len });
        }
        Ok(())
    }

    /// Makes `[start, start + len)` read-only for this process and publishes
    /// a descriptor for it.
    pub fn seal(&self, start: u64, len: u64) -> Result<SealToken, SealError> {
        self.sender_only()?;
        self.check_range(start, len)?;
        ensure_thread_access();
        let end = start + len;
        let mut st = self.sender.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((_, &(e, idx))) = st.active.range(..end).next_back() {
            if e > start {
                return Err(SealError::Overlap(idx));
            }
        }
        let mut index = None;
        for k in 0..self.capacity {
            let i = (st.next + k) % self.capacity;
            let s = self.desc(i)?.state.load(Ordering::Acquire);
            if s == STATE_FREE || s == STATE_RELEASED {
                index = Some(i);
                break;
            }
        }
        let index = index.ok_or(SealError::RingFull)?;
        // Pages first, so the descriptor never claims a seal that is not yet
        // in force.
        self.map.seal_range(start, len)?;
        let d = self.desc_mut(index)?;
        let epoch = d.epoch.load(Ordering::Relaxed) + 1;
        d.start.store(start, Ordering::Relaxed);
        d.len.store(len, Ordering::Relaxed);
        d.epoch.store(epoch, Ordering::Relaxed);
        d.state.store(STATE_SEALED, Ordering::Release);
        st.active.insert(start, (end, index));
        st.next = (index + 1) % self.capacity;
        self.map.seal_opened();
        Ok(SealToken { index, epoch })
    }

    /// True iff `token` is currently sealed and covers `[start, start+len)`.
    pub fn is_sealed(&self, token: SealToken, start: u64, len: u64) -> bool {
        let Ok(d) = self.desc(token.index) else {
            return false;
        };
        ensure_thread_access();
        if d.state.load(Ordering::Acquire) != STATE_SEALED {
            return false;
        }
        let (s, l, e) = (
            d.start.load(Ordering::Relaxed),
            d.len.load(Ordering::Relaxed),
            d.epoch.load(Ordering::Relaxed),
        );
        // A concurrent reuse would have changed the state first.
        let still = d.state.load(Ordering::Acquire) == STATE_SEALED;
        still && e == token.epoch && start >= s && start.saturating_add(len) <= s + l
    }

    /// Descriptor state of `token`, or `None` if its slot has moved on.
    pub fn state(&self, token: SealToken) -> Option<u8> {
        let d = self.desc(token.index).ok()?;
        ensure_thread_access();
        let s = d.state.load(Ordering::Acquire);
        (d.epoch.load(Ordering::Acquire) == token.epoch).then_some(s)
    }

    /// Receiver: the call using `token` is finished.
    pub fn mark_complete(&self, token: SealToken) -> Result<(), SealError> {
        if self.role != Role::Receiver {
            return Err(SealError::WrongRole(Role::Receiver));
        }
        ensure_thread_access();
        let d = self.desc_mut(token.index)?;
        if d.epoch.load(Ordering::Acquire) != token.epoch {
            return Err(SealError::Stale(token.index));
        }
        d.state
            .compare_exchange(STATE_SEALED, STATE_COMPLETED, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| ())
            .map_err(|s| SealError::WrongState {
                index: token.index,
                state: state_name(s),
                expected: "sealed",
            })
    }

    /// Sender: makes the range writable again once the receiver is done.
    pub fn release(&self, token: SealToken) -> Result<(), SealError> {
        self.release_batch(&[token]).pop().unwrap()
    }

    /// Releases several seals with one protection change per contiguous run.
    /// Seals that are not complete are skipped with an error.
    pub fn release_batch(&self, tokens: &[SealToken]) -> Vec<Result<(), SealError>> {
        if self.sender_only().is_err() {
            return tokens.iter().map(|_| Err(SealError::WrongRole(Role::Sender))).collect();
        }
        ensure_thread_access();
        let mut st = self.sender.lock().unwrap_or_else(|e| e.into_inner());
        let mut out = Vec::with_capacity(tokens.len());
        let mut ranges = Vec::with_capacity(tokens.len());
        for t in tokens {
            out.push(self.check_releasable(*t).map(|r| {
                ranges.push((r.0, r.1, t.index));
            }));
        }
        ranges.sort_unstable();
        let mut i = 0;
        while i < ranges.len() {
            let (lo, mut hi, _) = ranges[i];
            let mut j = i + 1;
            while j < ranges.len() && ranges[j].0 == hi {
                hi = ranges[j].1;
                j += 1;
            }
            if let Err(e) = self.map.unseal_range(lo, hi - lo) {
                // Leave these sealed; report on every token in the run.
                let msg = e.to_string();
                for r in &ranges[i..j] {
                    if let Some(k) = tokens.iter().position(|t| t.index == r.2) {
                        out[k] = Err(SealError::Io(std::io::Error::other(msg.clone())));
                    }
                }
                i = j;
                continue;
            }
            for &(start, _, index) in &ranges[i..j] {
                if let Ok(d) = self.desc_mut(index) {
                    d.state.store(STATE_RELEASED, Ordering::Release);
                }
                st.active.remove(&start);
                self.map.seal_closed();
            }
            i = j;
        }
        out
    }

    fn check_releasable(&self, t: SealToken) -> Result<(u64, u64), SealError> {
        let d = self.desc(t.index)?;
        if d.epoch.load(Ordering::Acquire) != t.epoch {
            return Err(SealError::Stale(t.index));
        }
        match d.state.load(Ordering::Acquire) {
            STATE_COMPLETED => {
                let start = d.start.load(Ordering::Relaxed);
                Ok((start, start + d.len.load(Ordering::Relaxed)))
            }
            s => Err(SealError::WrongState {
                index: t.index,
                state: state_name(s),
                expected: "completed",
            }),
        }
    }

    /// Seals currently held by this sender.
    pub fn active(&self) -> usize {
        self.sender.lock().unwrap_or_else(|e| e.into_inner()).active.len()
    }
}

impl Drop for SealRing {
    fn drop(&mut self) {
        if self.role != Role::Sender {
            return;
        }
        let st = self.sender.get_mut().unwrap_or_else(|e| e.into_inner());
        for (&start, &(end, _)) in &st.active {
            let _ = self.map.unseal_range(start, end - start);
            self.map.seal_closed();
        }
        if self.local.is_some() {
            return;
        }
        let bytes = (self.capacity as u64 * DESCRIPTOR_SIZE).next_multiple_of(PAGE);
        let _ = self.map.set_range_permission(self.addr, bytes, perm::RW);
    }
}

#[cfg(test)]
mod tests;
