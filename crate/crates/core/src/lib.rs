//! Shared-memory RPC with fixed-address heaps.
//!
//! Processes that map the same pool exchange pointer-rich data structures
//! without serialization. Heap ranges, channel names, leases and quotas are
//! managed by a global [`orchestrator`]. A sender can [`seal`] a message so
//! the receiver knows it cannot change in flight, and a receiver can process
//! untrusted data inside a [`sandbox`] that confines it to the message. Nodes
//! outside the pool talk through the [`fallback`] transport, which keeps the
//! same pointer-based interface by migrating pages between two peers.

pub mod config;
pub mod fallback;
pub mod heap;
pub mod ids;
pub mod orchestrator;
pub mod rpc;
pub mod runtime;
pub mod sandbox;
pub mod seal;

pub use config::{OrchestratorConfig, RuntimeConfig};
pub use ids::{ChannelId, HeapId, HolderId, LeaseId};

#[cfg(test)]
#[global_allocator]
static ALLOC: sandbox::SandboxAlloc = sandbox::SandboxAlloc;
