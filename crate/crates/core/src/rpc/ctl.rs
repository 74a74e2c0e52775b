//! Control blocks that let the two ends of a shared-memory connection find
//! each other's rings.
//!
//! The channel heap's root slot 0 points to a [`ChannelCtl`]. A client builds
//! a [`ConnCtl`] with its request ring, call table and seal ring, and pushes
//! a connect request carrying the block's address into the channel's accept
//! ring. The server opens the rings and sets `accepted`.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

pub const CHANNEL_MAGIC: [u8; 8] = *b"RPCCHAN1";
pub const CONN_MAGIC: [u8; 8] = *b"RPCCONN1";

pub const ACCEPT_OK: u32 = 1;
pub const ACCEPT_REFUSED: u32 = 2;

/// Root of a channel heap (40 bytes).
#[repr(C)]
pub struct ChannelCtl {
    pub magic: AtomicU64,
    pub accept_ring: u64,
    pub accept_capacity: u64,
    pub next_conn: AtomicU64,
    pub closing: AtomicU32,
    pub _pad: u32,
}

/// One connection's rendezvous block (72 bytes).
#[repr(C)]
pub struct ConnCtl {
    pub magic: AtomicU64,
    pub conn_id: AtomicU64,
    pub req_ring: u64,
    pub calls: u64,
    pub calls_capacity: u32,
    pub seal_capacity: u32,
    pub seal_ring: u64,
    pub accepted: AtomicU32,
    pub closed: AtomicU32,
    pub heap_id: u64,
}

pub fn magic_word(m: [u8; 8]) -> u64 {
    u64::from_le_bytes(m)
}

impl ChannelCtl {
    pub fn is_ready(&self) -> bool {
        self.magic.load(Ordering::Acquire) == magic_word(CHANNEL_MAGIC)
    }
}

impl ConnCtl {
    pub fn is_valid(&self) -> bool {
        self.magic.load(Ordering::Acquire) == magic_word(CONN_MAGIC)
    }
}
