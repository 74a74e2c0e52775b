//! Request rings and call records in shared memory.
//!
//! # Message ring
//!
//! A bounded multi-producer multi-consumer queue of fixed 64-byte slots.
//! All fields little endian, offsets from the ring address:
//!
//! | offset | field |
//! |-------:|-------|
//! | 0      | `capacity: u64`, a power of two |
//! | 8      | `mask: u64`, `capacity - 1` |
//! | 64     | `tail: u64`, next position to produce (own cache line) |
//! | 128    | `head: u64`, next position to consume (own cache line) |
//! | 192    | `capacity` slots of 64 bytes |
//!
//! Slot `i` is `seq: u64` followed by a 56-byte [`RpcMessage`]. Initially
//! `seq = i`. A producer that claims position `p` (CAS on `tail`, only when
//! the slot's `seq == p`) writes the message and then stores `seq = p + 1`
//! with release ordering; that store is the slot's ready flag. A consumer
//! claims `p` (CAS on `head`, only when `seq == p + 1`), reads the message
//! and stores `seq = p + capacity`, handing the slot to the next lap.
//!
//! # Call records
//!
//! The response side is a table of 64-byte records, one per in-flight call,
//! owned by the client: `state: u32, code: u32, sequence: u64, ret: u64`,
//! padding to 64. The client sets `sequence` and `state = PENDING` before
//! sending; the server stores `ret` and `code`, then `state` with release
//! ordering.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use crate::heap::{HeapError, SharedHeap, PAGE};

pub const SLOT_SIZE: u64 = 64;
pub const HEADER_SIZE: u64 = 192;
pub const MESSAGE_SIZE: usize = 56;

pub mod flags {
    pub const SEALED: u32 = 1;
    pub const SANDBOX: u32 = 2;
}

/// One request as it travels through a ring or a fallback frame.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RpcMessage {
    pub sequence: u64,
    pub function: u32,
    pub flags: u32,
    pub arg: u64,
    pub scope_start: u64,
    pub scope_len: u64,
    pub seal_index: u32,
    pub call_slot: u32,
    pub seal_epoch: u64,
}

const _: () = assert!(std::mem::size_of::<RpcMessage>() == MESSAGE_SIZE);

impl RpcMessage {
    pub fn is_sealed(&self) -> bool {
        self.flags & flags::SEALED != 0
    }

    pub fn wants_sandbox(&self) -> bool {
        self.flags & flags::SANDBOX != 0
    }

    pub fn scope(&self) -> Option<(u64, u64)> {
        (self.scope_len > 0).then_some((self.scope_start, self.scope_len))
    }

    pub fn encode(&self) -> [u8; MESSAGE_SIZE] {
        let mut b = [0u8; MESSAGE_SIZE];
        b[0..8].copy_from_slice(&self.sequence.to_le_bytes());
        b[8..12].copy_from_slice(&self.function.to_le_bytes());
        b[12..16].copy_from_slice(&self.flags.to_le_bytes());
        b[16..24].copy_from_slice(&self.arg.to_le_bytes());
        b[24..32].copy_from_slice(&self.scope_start.to_le_bytes());
        b[32..40].copy_from_slice(&self.scope_len.to_le_bytes());
        b[40..44].copy_from_slice(&self.seal_index.to_le_bytes());
        b[44..48].copy_from_slice(&self.call_slot.to_le_bytes());
        b[48..56].copy_from_slice(&self.seal_epoch.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8]) -> Option<Self> {
        if b.len() < MESSAGE_SIZE {
            return None;
        }
        let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        Some(Self {
            sequence: u64_at(0),
            function: u32_at(8),
            flags: u32_at(12),
            arg: u64_at(16),
            scope_start: u64_at(24),
            scope_len: u64_at(32),
            seal_index: u32_at(40),
            call_slot: u32_at(44),
            seal_epoch: u64_at(48),
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RingError {
    #[error("ring capacity {0} is not a power of two of at least 2")]
    Capacity(u64),
    #[error("no ring at {0:#x}")]
    Corrupt(u64),
    #[error(transparent)]
    Heap(#[from] HeapError),
}

/// Handle on a ring that lives in shared memory.
#[derive(Clone, Copy)]
pub struct MessageRing {
    addr: u64,
    mask: u64,
}

// SAFETY: all shared state is accessed through atomics or after claiming a
// slot; the handle itself is two integers.
unsafe impl Send for MessageRing {}
unsafe impl Sync for MessageRing {}

impl MessageRing {
    pub fn bytes_for(capacity: u64) -> u64 {
        HEADER_SIZE + capacity * SLOT_SIZE
    }

    /// Allocates and initialises a ring in `heap`.
    pub fn create(heap: &SharedHeap, capacity: u64) -> Result<Self, RingError> {
        if capacity < 2 || !capacity.is_power_of_two() {
            return Err(RingError::Capacity(capacity));
        }
        let addr = heap.alloc(Self::bytes_for(capacity), PAGE)?;
        // SAFETY: freshly allocated, large enough, 64-byte aligned.
        unsafe { Self::init(addr, capacity) }
    }

    /// Initialises a ring at `addr`.
    ///
    /// # Safety
    /// `addr` must point to [`Self::bytes_for`] writable bytes, 64-byte
    /// aligned, not in use by anyone else.
    pub unsafe fn init(addr: u64, capacity: u64) -> Result<Self, RingError> {
        if capacity < 2 || !capacity.is_power_of_two() {
            return Err(RingError::Capacity(capacity));
        }
        let r = Self {
            addr,
            mask: capacity - 1,
        };
        r.word(64).store(0, Ordering::Relaxed);
        r.word(128).store(0, Ordering::Relaxed);
        for i in 0..capacity {
            r.seq(i).store(i, Ordering::Relaxed);
        }
        r.word(8).store(capacity - 1, Ordering::Relaxed);
        r.word(0).store(capacity, Ordering::Release);
        Ok(r)
    }

    /// Opens a ring initialised by another process.
    ///
    /// # Safety
    /// `addr` must be the address of a ring inside a mapped heap.
    pub unsafe fn open(addr: u64) -> Result<Self, RingError> {
        if addr == 0 || addr % 64 != 0 {
            return Err(RingError::Corrupt(addr));
        }
        let cap = (*(addr as *const AtomicU64)).load(Ordering::Acquire);
        let mask = (*((addr + 8) as *const AtomicU64)).load(Ordering::Acquire);
        if cap < 2 || !cap.is_power_of_two() || mask != cap - 1 {
            return Err(RingError::Corrupt(addr));
        }
        Ok(Self { addr, mask })
    }

    pub fn addr(&self) -> u64 {
        self.addr
    }

    pub fn capacity(&self) -> u64 {
        self.mask + 1
    }

    fn word(&self, off: u64) -> &AtomicU64 {
        // SAFETY: header words inside the ring.
        unsafe { &*((self.addr + off) as *const AtomicU64) }
    }

    fn slot_addr(&self, pos: u64) -> u64 {
        self.addr + HEADER_SIZE + (pos & self.mask) * SLOT_SIZE
    }

    fn seq(&self, pos: u64) -> &AtomicU64 {
        // SAFETY: first word of a slot inside the ring.
        unsafe { &*(self.slot_addr(pos) as *const AtomicU64) }
    }

    /// Enqueues `msg`; false if the ring is full.
    pub fn try_push(&self, msg: &RpcMessage) -> bool {
        let tail = self.word(64);
        let mut pos = tail.load(Ordering::Relaxed);
        loop {
            let seq = self.seq(pos).load(Ordering::Acquire);
            let dif = seq.wrapping_sub(pos) as i64;
            if dif == 0 {
                match tail.compare_exchange_weak(pos, pos + 1, Ordering::Relaxed, Ordering::Relaxed) {
                    Ok(_) => {
                        let p = (self.slot_addr(pos) + 8) as *mut RpcMessage;
                        // SAFETY: the slot is claimed; nobody else touches it
                        // until seq is published.
                        unsafe { std::ptr::write_volatile(p, *msg) };
                        self.seq(pos).store(pos + 1, Ordering::Release);
                        return true;
                    }
                    Err(cur) => pos = cur,
                }
            } else if dif < 0 {
                return false;
            } else {
                pos = tail.load(Ordering::Relaxed);
            }
        }
    }

    /// Dequeues the oldest ready message.
    pub fn try_pop(&self) -> Option<RpcMessage> {
        let head = self.word(128);
        let mut pos = head.load(Ordering::Relaxed);
        loop {
            let seq = self.seq(pos).load(Ordering::Acquire);
            let dif = seq.wrapping_sub(pos + 1) as i64;
            if dif == 0 {
                match head.compare_exchange_weak(pos, pos + 1, Ordering::Relaxed, Ordering::Relaxed) {
                    Ok(_) => {
                        let p = (self.slot_addr(pos) + 8) as *const RpcMessage;
                        // SAFETY: claimed slot with a published message.
                        let m = unsafe { std::ptr::read_volatile(p) };
                        self.seq(pos).store(pos + self.mask + 1, Ordering::Release);
                        return Some(m);
                    }
                    Err(cur) => pos = cur,
                }
            } else if dif < 0 {
                return None;
            } else {
                pos = head.load(Ordering::Relaxed);
            }
        }
    }

    /// Messages produced but not yet consumed (approximate under contention).
    pub fn len(&self) -> u64 {
        let t = self.word(64).load(Ordering::Acquire);
        let h = self.word(128).load(Ordering::Acquire);
        t.saturating_sub(h)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub mod state {
    pub const IDLE: u32 = 0;
    pub const PENDING: u32 = 1;
    pub const IN_PROGRESS: u32 = 2;
    pub const COMPLETE: u32 = 3;
    pub const ERROR: u32 = 4;
}

#[repr(C, align(64))]
pub struct CallRecord {
    pub state: AtomicU32,
    pub code: AtomicU32,
    pub sequence: AtomicU64,
    pub ret: AtomicU64,
    _pad: [u64; 5],
}

const _: () = assert!(std::mem::size_of::<CallRecord>() == 64);

impl CallRecord {
    fn new() -> Self {
        Self {
            state: AtomicU32::new(state::IDLE),
            code: AtomicU32::new(0),
            sequence: AtomicU64::new(0),
            ret: AtomicU64::new(0),
            _pad: [0; 5],
        }
    }

    /// Publishes the outcome of call `sequence`. Ignored if the record has
    /// moved on to another call.
    pub fn finish(&self, sequence: u64, code: u32, ret: u64) -> bool {
        if self.sequence.load(Ordering::Acquire) != sequence {
            return false;
        }
        self.ret.store(ret, Ordering::Relaxed);
        self.code.store(code, Ordering::Relaxed);
        let s = if code == 0 { state::COMPLETE } else { state::ERROR };
        self.state.store(s, Ordering::Release);
        true
    }
}

/// A table of call records in shared memory or in private memory.
pub struct CallTable {
    ptr: *const CallRecord,
    len: u32,
    _own: Option<Box<[CallRecord]>>,
}

// SAFETY: records are only accessed through atomics.
unsafe impl Send for CallTable {}
unsafe impl Sync for CallTable {}

impl CallTable {
    pub fn create(heap: &SharedHeap, len: u32) -> Result<Self, HeapError> {
        let addr = heap.alloc(len as u64 * 64, 64)?;
        // SAFETY: freshly allocated and large enough.
        unsafe {
            for i in 0..len as u64 {
                std::ptr::write((addr + i * 64) as *mut CallRecord, CallRecord::new());
            }
            Ok(Self::open(addr, len))
        }
    }

    /// # Safety
    /// `addr` must hold `len` records that stay mapped while this lives.
    pub unsafe fn open(addr: u64, len: u32) -> Self {
        Self {
            ptr: addr as *const CallRecord,
            len,
            _own: None,
        }
    }

    pub fn local(len: u32) -> Self {
        let b: Box<[CallRecord]> = (0..len).map(|_| CallRecord::new()).collect();
        Self {
            ptr: b.as_ptr(),
            len,
            _own: Some(b),
        }
    }

    pub fn addr(&self) -> u64 {
        self.ptr as u64
    }

    pub fn len(&self) -> u32 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: u32) -> Option<&CallRecord> {
        // SAFETY: bounds checked; see open.
        (i < self.len).then(|| unsafe { &*self.ptr.add(i as usize) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heap::tests::scratch;
    use std::collections::HashMap;
    use std::sync::Arc;

    fn msg(producer: u32, n: u64) -> RpcMessage {
        RpcMessage {
            sequence: n,
            function: producer,
            ..Default::default()
        }
    }

    #[test]
    fn message_encoding_round_trips() {
        let m = RpcMessage {
            sequence: 7,
            function: 3,
            flags: flags::SEALED | flags::SANDBOX,
            arg: 0x7c00_0000_1000,
            scope_start: 0x7c00_0000_0000,
            scope_len: 8192,
            seal_index: 11,
            call_slot: 5,
            seal_epoch: 99,
        };
        assert_eq!(RpcMessage::decode(&m.encode()), Some(m));
        assert_eq!(RpcMessage::decode(&[0; 10]), None);
    }

    #[test]
    fn fifo_and_full() {
        let h = scratch(1 << 20);
        let r = MessageRing::create(&h, 4).unwrap();
        for i in 0..4 {
            assert!(r.try_push(&msg(0, i)));
        }
        assert!(!r.try_push(&msg(0, 9)));
        assert_eq!(r.len(), 4);
        for i in 0..4 {
            assert_eq!(r.try_pop().unwrap().sequence, i);
        }
        assert!(r.try_pop().is_none());
        // Wraps around.
        for lap in 0..10 {
            assert!(r.try_push(&msg(0, lap)));
            assert_eq!(r.try_pop().unwrap().sequence, lap);
        }
        let again = unsafe { MessageRing::open(r.addr()) }.unwrap();
        assert_eq!(again.capacity(), 4);
        assert!(MessageRing::create(&h, 3).is_err());
    }

    #[test]
    fn exactly_once_under_contention() {
        const P: u32 = 4;
        const M: u64 = 20_000;
        let h = scratch(1 << 20);
        let r = MessageRing::create(&h, 64).unwrap();
        let producers: Vec<_> = (0..P)
            .map(|p| {
                std::thread::spawn(move || {
                    for n in 0..M {
                        while !r.try_push(&msg(p, n)) {
                            std::thread::yield_now();
                        }
                    }
                })
            })
            .collect();
        let got = Arc::new(std::sync::Mutex::new(Vec::new()));
        let taken = Arc::new(AtomicU64::new(0));
        let total = P as u64 * M;
        let consumers: Vec<_> = (0..2)
            .map(|_| {
                let (got, taken) = (got.clone(), taken.clone());
                std::thread::spawn(move || {
                    let mut mine = Vec::new();
                    let mut last: HashMap<u32, u64> = HashMap::new();
                    while taken.load(Ordering::Acquire) < total {
                        match r.try_pop() {
                            Some(m) => {
                                taken.fetch_add(1, Ordering::AcqRel);
                                // Within one consumer, each producer's
                                // messages arrive in order.
                                if let Some(&l) = last.get(&m.function) {
                                    assert!(m.sequence > l);
                                }
                                last.insert(m.function, m.sequence);
                                mine.push((m.function, m.sequence));
                            }
                            None => std::thread::yield_now(),
                        }
                    }
                    got.lock().unwrap().extend(mine);
                })
            })
            .collect();
        for p in producers {
            p.join().unwrap();
        }
        for c in consumers {
            c.join().unwrap();
        }
        let mut all = got.lock().unwrap().clone();
        all.sort_unstable();
        let expect: Vec<(u32, u64)> = (0..P).flat_map(|p| (0..M).map(move |n| (p, n))).collect();
        assert_eq!(all, expect);
    }

    #[test]
    fn call_record_ignores_stale_sequence() {
        let t = CallTable::local(2);
        let r = t.get(1).unwrap();
        r.sequence.store(5, Ordering::Release);
        r.state.store(state::PENDING, Ordering::Release);
        assert!(!r.finish(4, 0, 1));
        assert_eq!(r.state.load(Ordering::Acquire), state::PENDING);
        assert!(r.finish(5, 7, 0));
        assert_eq!(r.state.load(Ordering::Acquire), state::ERROR);
        assert_eq!(r.code.load(Ordering::Acquire), 7);
        assert!(t.get(2).is_none());
    }
}
