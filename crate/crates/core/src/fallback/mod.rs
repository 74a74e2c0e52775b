//! Two-node page-migration transport for peers without a shared pool.
//!
//! The server allocates a dedicated heap for each client and both sides map
//! it at the same fixed address. Pages migrate between them on demand (see
//! [`Session`]), so pointers into the heap work unchanged on both sides and
//! the RPC API is the same as over shared memory. RPC requests, responses and
//! seal descriptors travel as frames on the same stream ([`frame`]).

mod copy;
pub mod frame;
mod session;

pub use copy::{deep_copy, ArrayField, CopyError, Element, Layout, LayoutRegistry};
pub use frame::{Frame, Hello};
pub use session::{client_hello, server_read_hello, Session, SessionEvents, SessionStats, Side, DEFAULT_HOLD};

use crate::ids::HeapId;
use crate::runtime::MapError;

#[derive(Debug, thiserror::Error)]
pub enum FallbackError {
    #[error("stream: {0}")]
    Io(#[from] std::io::Error),
    #[error("peer refused the session: {0}")]
    Rejected(String),
    #[error("heap descriptors differ: {0}")]
    Mismatch(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("heap {0} is not a mirror mapping")]
    NotMirror(HeapId),
    #[error("heap {0} already has a fallback session")]
    AlreadyServed(HeapId),
    #[error("session closed")]
    Closed,
    #[error(transparent)]
    Map(#[from] MapError),
}
