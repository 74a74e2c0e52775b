//! Benchmarks, the CoolDB document store and the multi-process harness used
//! by the acceptance suite.

pub mod alloctrace;
pub mod coherence;
pub mod cooldb;
pub mod e2e;
pub mod echo;
pub mod governance;
pub mod harness;
pub mod hostile;
pub mod micro;
pub mod nobench;
pub mod noop;
pub mod peer;
pub mod report;
pub mod sealcheck;
pub mod stats;
pub mod ycsb;

// Sandboxed handlers allocate from their sandbox's arena.
#[global_allocator]
static ALLOC: rpcool::sandbox::SandboxAlloc = rpcool::sandbox::SandboxAlloc;
