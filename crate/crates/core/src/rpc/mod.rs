//! Channels, connections and request dispatch.
//!
//! A server creates a named channel and registers handlers by function id;
//! clients connect by name and call functions with pointers into the
//! connection's heap. When client and server share the memory pool, requests
//! travel through a [`MessageRing`] in shared memory and responses through
//! [`CallRecord`]s; otherwise the connection uses the [`crate::fallback`]
//! transport with the same API.

mod busywait;
mod client;
mod ctl;
mod ring;
mod server;

pub use busywait::{next_sleep, BusyWait, LoadMonitor};
pub use client::{CallOptions, ConnectOptions, Connection, TransportChoice};
pub use ring::{flags, state, CallRecord, CallTable, MessageRing, RingError, RpcMessage, MESSAGE_SIZE};
pub use server::{CallContext, ChannelConfig, Handler, HandlerOptions, Server};

use crate::heap::HeapError;
use crate::orchestrator::OrchError;
use crate::runtime::{MapError, RuntimeError};
use crate::seal::SealError;

/// Codes at or above this value are reserved for the framework.
pub const FIRST_BUILTIN_CODE: u32 = 0x1_0000;
pub const ERR_UNKNOWN_FUNCTION: u32 = 0x1_0001;
pub const ERR_SEAL_VERIFY: u32 = 0x1_0002;
pub const ERR_SANDBOX_VIOLATION: u32 = 0x1_0003;
pub const ERR_HANDLER_FAULT: u32 = 0x1_0004;
pub const ERR_HANDLER_PANIC: u32 = 0x1_0005;
pub const ERR_BAD_ARGUMENT: u32 = 0x1_0006;
pub const ERR_SHUTDOWN: u32 = 0x1_0007;

/// Function ids at or above this value are reserved for the framework.
pub const FIRST_RESERVED_FUNCTION: u32 = 0xFFFF_FF00;
pub(crate) const FN_CONNECT: u32 = 0xFFFF_FFFF;
pub(crate) const FN_DISCONNECT: u32 = 0xFFFF_FFFE;

/// Stable id for a function name, so both sides can agree on ids without a
/// registry exchange (32-bit FNV-1a, kept below the reserved range).
pub fn function_id(name: &str) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in name.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h % FIRST_RESERVED_FUNCTION
}

#[derive(Debug, thiserror::Error)]
pub enum RpcError {
    #[error("handler returned error code {0}")]
    Remote(u32),
    #[error("no handler for function {0}")]
    UnknownFunction(u32),
    #[error("the receiver could not verify the seal on the arguments")]
    SealVerification,
    #[error("handler touched memory outside its sandbox")]
    SandboxViolation,
    #[error("handler faulted")]
    HandlerFault,
    #[error("handler panicked")]
    HandlerPanic,
    #[error("argument is outside the connection's heap or malformed")]
    BadArgument,
    #[error("server is shutting down")]
    Shutdown,
    #[error("transport down: {0}")]
    Transport(String),
    #[error("function {0} is already registered")]
    DuplicateHandler(u32),
    #[error("function id {0:#x} is reserved")]
    ReservedFunction(u32),
    #[error("call already responded to")]
    DoubleRespond,
    #[error("user error codes must be below {FIRST_BUILTIN_CODE:#x}, got {0:#x}")]
    CodeOutOfRange(u32),
    #[error("channel {0:?} has no endpoint this node can reach")]
    Unreachable(String),
    #[error(transparent)]
    Orch(#[from] OrchError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Heap(#[from] HeapError),
    #[error(transparent)]
    Seal(#[from] SealError),
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Fallback(#[from] crate::fallback::FallbackError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl RpcError {
    /// Error for a non-zero completion code.
    pub fn from_code(code: u32, function: u32) -> Self {
        match code {
            ERR_UNKNOWN_FUNCTION => Self::UnknownFunction(function),
            ERR_SEAL_VERIFY => Self::SealVerification,
            ERR_SANDBOX_VIOLATION => Self::SandboxViolation,
            ERR_HANDLER_FAULT => Self::HandlerFault,
            ERR_HANDLER_PANIC => Self::HandlerPanic,
            ERR_BAD_ARGUMENT => Self::BadArgument,
            ERR_SHUTDOWN => Self::Shutdown,
            c => Self::Remote(c),
        }
    }

    /// The completion code a handler error maps to, if any.
    pub fn code(&self) -> Option<u32> {
        Some(match self {
            Self::Remote(c) => *c,
            Self::UnknownFunction(_) => ERR_UNKNOWN_FUNCTION,
            Self::SealVerification => ERR_SEAL_VERIFY,
            Self::SandboxViolation => ERR_SANDBOX_VIOLATION,
            Self::HandlerFault => ERR_HANDLER_FAULT,
            Self::HandlerPanic => ERR_HANDLER_PANIC,
            Self::BadArgument => ERR_BAD_ARGUMENT,
            Self::Shutdown => ERR_SHUTDOWN,
            _ => return None,
        })
    }
}

/// Which transport a connection uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    SharedMemory,
    Fallback,
}

#[cfg(test)]
mod tests;
