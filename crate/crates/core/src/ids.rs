//! Identifiers shared between the orchestrator, node runtimes and the wire.

use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};

/// Identity of a process holding heaps.
///
/// The incarnation distinguishes a restarted process from its predecessor even
/// when the operating system reuses the pid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HolderId {
    pub node: u32,
    pub pid: u32,
    pub incarnation: u32,
}

impl HolderId {
    pub const fn new(node: u32, pid: u32, incarnation: u32) -> Self {
        Self {
            node,
            pid,
            incarnation,
        }
    }

    /// A fresh identity for the calling process on `node`.
    ///
    /// Every call yields a new incarnation, so two runtimes created in one
    /// process are distinct holders.
    pub fn for_current_process(node: u32) -> Self {
        static COUNTER: AtomicU32 = AtomicU32::new(0);
        let seq = COUNTER.fetch_add(1, Ordering::Relaxed);
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.subsec_nanos())
            .unwrap_or(0);
        Self {
            node,
            pid: std::process::id(),
            incarnation: (nanos & 0xFFFF_0000) | (seq & 0xFFFF),
        }
    }
}

impl fmt::Display for HolderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}#{}", self.node, self.pid, self.incarnation)
    }
}

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub u64);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_newtype!(
    /// Orchestrator-issued heap identifier.
    HeapId
);
id_newtype!(
    /// Orchestrator-issued channel identifier.
    ChannelId
);
id_newtype!(
    /// Orchestrator-issued lease identifier.
    LeaseId
);
