//! Per-process node runtime: heap mappings, lease renewal and failure
//! notifications.

pub mod fault;
mod mapping;
pub mod sys;

pub use fault::{catch, ensure_thread_access, Fault, FaultKind};
pub(crate) use mapping::for_each_mapping;
pub use mapping::{mapping_containing, Backing, HeapMapping, MapError};

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::time::Duration;

use crossbeam::channel::{Receiver, Sender};

use crate::config::{ConfigError, RuntimeConfig, DEFAULT_ORCH_ENDPOINT, ENV_ORCH};
use crate::heap::HeapError;
use crate::ids::{ChannelId, HeapId, HolderId};
use crate::orchestrator::{
    ChannelOptions, ChannelRecord, FailureNotification, HeapDescriptor, LeaseGrant, OrchError,
    Orchestration, OrchestratorClient,
};

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Orch(#[from] OrchError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Heap(#[from] HeapError),
    #[error("heap {heap} still has {count} active seals; release them before unmapping")]
    ActiveSeals { heap: HeapId, count: usize },
    #[error("heap {heap} does not match: {detail}")]
    Mismatch { heap: HeapId, detail: String },
    #[error("heap {0} is not mapped by this runtime")]
    UnknownHeap(HeapId),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

struct Held {
    map: Arc<HeapMapping>,
    lease: LeaseGrant,
    lost: bool,
}

pub(crate) struct Inner {
    cfg: RuntimeConfig,
    orch: Arc<dyn Orchestration>,
    heaps: Mutex<HashMap<HeapId, Held>>,
    subs: Mutex<Vec<Sender<FailureNotification>>>,
    stop: AtomicBool,
}

/// Handle to this process's runtime. Cheap to clone.
#[derive(Clone)]
pub struct NodeRuntime {
    inner: Arc<Inner>,
}

impl NodeRuntime {
    pub fn new(cfg: RuntimeConfig, orch: Arc<dyn Orchestration>) -> Result<Self, RuntimeError> {
        cfg.validate()?;
        fault::install();
        crate::sandbox::init(&cfg);
        let inner = Arc::new(Inner {
            cfg,
            orch,
            heaps: Mutex::new(HashMap::new()),
            subs: Mutex::new(Vec::new()),
            stop: AtomicBool::new(false),
        });
        spawn_renewer(Arc::downgrade(&inner));
        spawn_notifier(Arc::downgrade(&inner));
        Ok(Self { inner })
    }

    /// Connects to the orchestrator at `endpoint` as a fresh holder.
    pub fn connect(cfg: RuntimeConfig, endpoint: &str) -> Result<Self, RuntimeError> {
        let holder = HolderId::for_current_process(cfg.node_id);
        let client = OrchestratorClient::connect(endpoint, holder)?;
        Self::new(cfg, Arc::new(client))
    }

    /// Configuration and orchestrator endpoint from `RPCOOL_*` variables.
    pub fn from_env() -> Result<Self, RuntimeError> {
        let cfg = RuntimeConfig::from_env()?;
        let endpoint = std::env::var(ENV_ORCH).unwrap_or_else(|_| DEFAULT_ORCH_ENDPOINT.into());
        Self::connect(cfg, &endpoint)
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.inner.cfg
    }

    pub fn holder(&self) -> HolderId {
        self.inner.orch.holder()
    }

    pub fn orchestrator(&self) -> &Arc<dyn Orchestration> {
        &self.inner.orch
    }

    pub fn has_pool(&self) -> bool {
        self.inner.cfg.pool_id.is_some()
    }

    pub fn pool_dir(&self) -> &Path {
        &self.inner.cfg.pool_dir
    }

    fn track(&self, map: Arc<HeapMapping>, lease: LeaseGrant) -> Arc<HeapMapping> {
        self.inner.heaps.lock().unwrap().insert(
            map.heap_id(),
            Held {
                map: map.clone(),
                lease,
                lost: false,
            },
        );
        map
    }

    /// Allocates a new heap and maps it from the pool.
    pub fn alloc_heap(
        &self,
        size: u64,
        channel: Option<ChannelId>,
    ) -> Result<Arc<HeapMapping>, RuntimeError> {
        let (desc, lease) = self.inner.orch.alloc_heap(size, channel)?;
        match HeapMapping::map_pool(&desc, self.pool_dir(), true) {
            Ok(m) => Ok(self.track(m, lease)),
            Err(e) => {
                let _ = self.inner.orch.release_heap(desc.heap_id);
                Err(e.into())
            }
        }
    }

    /// Allocates a new heap backed by a local mirror instead of the pool.
    pub fn alloc_mirror_heap(
        &self,
        size: u64,
        channel: Option<ChannelId>,
    ) -> Result<Arc<HeapMapping>, RuntimeError> {
        let (desc, lease) = self.inner.orch.alloc_heap(size, channel)?;
        match HeapMapping::map_mirror(&desc) {
            Ok(m) => Ok(self.track(m, lease)),
            Err(e) => {
                let _ = self.inner.orch.release_heap(desc.heap_id);
                Err(e.into())
            }
        }
    }

    /// Attaches to a heap served by a fallback peer and maps an empty mirror
    /// of it. `expected` is the descriptor the peer announced.
    pub fn attach_mirror_heap(
        &self,
        expected: &HeapDescriptor,
    ) -> Result<Arc<HeapMapping>, RuntimeError> {
        let (desc, lease) = self.inner.orch.attach_heap(expected.heap_id)?;
        if desc != *expected {
            let _ = self.inner.orch.release_heap(desc.heap_id);
            return Err(RuntimeError::Mismatch {
                heap: desc.heap_id,
                detail: format!(
                    "peer announced {:#x}+{:#x}, orchestrator has {:#x}+{:#x}",
                    expected.base, expected.size, desc.base, desc.size
                ),
            });
        }
        match HeapMapping::map_mirror(&desc) {
            Ok(m) => Ok(self.track(m, lease)),
            Err(e) => {
                let _ = self.inner.orch.release_heap(desc.heap_id);
                Err(e.into())
            }
        }
    }

    /// Registers a channel and maps its first heap.
    pub fn register_channel(
        &self,
        name: &str,
        opts: ChannelOptions,
    ) -> Result<(ChannelRecord, Arc<HeapMapping>), RuntimeError> {
        let (record, lease) = self.inner.orch.register_channel(name, opts)?;
        let desc = &record.heaps[0];
        match HeapMapping::map_pool(desc, self.pool_dir(), true) {
            Ok(m) => Ok((record.clone(), self.track(m, lease))),
            Err(e) => {
                let _ = self.inner.orch.close_channel(name);
                Err(e.into())
            }
        }
    }

    /// Maps a heap created by another process.
    pub fn attach_heap(&self, heap: HeapId) -> Result<Arc<HeapMapping>, RuntimeError> {
        if let Some(m) = self.heap(heap) {
            return Ok(m);
        }
        let (desc, lease) = self.inner.orch.attach_heap(heap)?;
        match HeapMapping::map_pool(&desc, self.pool_dir(), false) {
            Ok(m) => Ok(self.track(m, lease)),
            Err(e) => {
                let _ = self.inner.orch.release_heap(heap);
                Err(e.into())
            }
        }
    }

    pub fn heap(&self, heap: HeapId) -> Option<Arc<HeapMapping>> {
        self.inner
            .heaps
            .lock()
            .unwrap()
            .get(&heap)
            .map(|h| h.map.clone())
    }

    pub fn lease(&self, heap: HeapId) -> Option<LeaseGrant> {
        self.inner.heaps.lock().unwrap().get(&heap).map(|h| h.lease)
    }

    /// True once renewal of the heap's lease has failed for good.
    pub fn lease_lost(&self, heap: HeapId) -> bool {
        self.inner
            .heaps
            .lock()
            .unwrap()
            .get(&heap)
            .is_some_and(|h| h.lost)
    }

    pub fn mapped_heaps(&self) -> Vec<HeapDescriptor> {
        self.inner
            .heaps
            .lock()
            .unwrap()
            .values()
            .map(|h| h.map.descriptor().clone())
            .collect()
    }

    /// Unmaps a heap and returns its lease. Refused while seals are active.
    pub fn unmap_heap(&self, heap: HeapId) -> Result<(), RuntimeError> {
        let held = {
            let mut heaps = self.inner.heaps.lock().unwrap();
            let h = heaps.get(&heap).ok_or(RuntimeError::UnknownHeap(heap))?;
            let count = h.map.active_seals();
            if count > 0 {
                return Err(RuntimeError::ActiveSeals { heap, count });
            }
            heaps.remove(&heap).unwrap()
        };
        self.inner.release(held)
    }

    /// Receives failure notifications for heaps this runtime maps.
    pub fn failures(&self) -> Receiver<FailureNotification> {
        let (tx, rx) = crossbeam::channel::unbounded();
        self.inner.subs.lock().unwrap().push(tx);
        rx
    }

    /// Releases every heap and stops background threads.
    pub fn shutdown(&self) {
        self.inner.shutdown();
    }
}

impl Inner {
    fn release(&self, held: Held) -> Result<(), RuntimeError> {
        let path = held.map.backing_path().map(Path::to_path_buf);
        let id = held.map.heap_id();
        drop(held);
        let reclaimed = self.orch.release_heap(id)?;
        if reclaimed {
            if let Some(p) = path {
                let _ = std::fs::remove_file(p);
            }
        }
        Ok(())
    }

    fn shutdown(&self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let held: Vec<Held> = self.heaps.lock().unwrap().drain().map(|(_, h)| h).collect();
        for h in held {
            if let Err(e) = self.release(h) {
                log::debug!("release during shutdown: {e}");
            }
        }
    }
}

impl Drop for Inner {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn spawn_renewer(w: Weak<Inner>) {
    let _ = std::thread::Builder::new()
        .name("rpcool-lease".into())
        .spawn(move || {
            let mut last = std::time::Instant::now();
            loop {
                // Never slower than a third of the shortest granted term, in
                // case the orchestrator runs shorter leases than configured here.
                let interval = match w.upgrade() {
                    Some(inner) => {
                        let heaps = inner.heaps.lock().unwrap();
                        let shortest = heaps
                            .values()
                            .map(|h| h.lease.term / 3)
                            .filter(|t| !t.is_zero())
                            .min();
                        shortest.map_or(inner.cfg.renew_interval, |t| {
                            t.min(inner.cfg.renew_interval)
                        })
                    }
                    None => return,
                };
                // Short naps, so a heap attached later with a short term is
                // picked up in time.
                let due = interval.saturating_sub(last.elapsed());
                std::thread::sleep(due.min(Duration::from_millis(20)));
                let Some(inner) = w.upgrade() else { return };
                if inner.stop.load(Ordering::SeqCst) {
                    return;
                }
                if last.elapsed() < interval {
                    continue;
                }
                last = std::time::Instant::now();
                let leases: Vec<(HeapId, LeaseGrant)> = inner
                    .heaps
                    .lock()
                    .unwrap()
                    .iter()
                    .filter(|(_, h)| !h.lost)
                    .map(|(id, h)| (*id, h.lease))
                    .collect();
                for (id, lease) in leases {
                    match inner.orch.renew_lease(lease.lease_id) {
                        Ok(_) => {}
                        Err(OrchError::Unreachable(e)) => {
                            log::warn!("lease renewal for heap {id} failed: {e}");
                        }
                        Err(e) => {
                            log::warn!("lease on heap {id} lost: {e}");
                            if let Some(h) = inner.heaps.lock().unwrap().get_mut(&id) {
                                h.lost = true;
                            }
                        }
                    }
                }
            }
        });
}

fn spawn_notifier(w: Weak<Inner>) {
    let rx = match w.upgrade() {
        Some(inner) => inner.orch.notifications(),
        None => return,
    };
    let _ = std::thread::Builder::new()
        .name("rpcool-notify".into())
        .spawn(move || loop {
            let got = rx.recv_timeout(Duration::from_millis(100));
            let Some(inner) = w.upgrade() else { return };
            if inner.stop.load(Ordering::SeqCst) {
                return;
            }
            match got {
                Ok(n) => {
                    log::info!("holder {} failed (heap {})", n.failed, n.heap_id);
                    inner
                        .subs
                        .lock()
                        .unwrap()
                        .retain(|tx| tx.send(n.clone()).is_ok());
                }
                Err(crossbeam::channel::RecvTimeoutError::Timeout) => {}
                Err(_) => return,
            }
        });
}

/// Maps a private heap at a process-unique address outside any orchestrator
/// pool. For benchmarks and tests that need a heap without a cluster.
pub fn scratch_heap(pool_dir: &Path, size: u64) -> Result<Arc<HeapMapping>, MapError> {
    static NEXT: AtomicU64 = AtomicU64::new(0);
    const SCRATCH_BASE: u64 = 0x7A00_0000_0000;
    const STRIDE: u64 = 1 << 34;
    let n = NEXT.fetch_add(1, Ordering::Relaxed);
    let size = size.next_multiple_of(crate::heap::PAGE);
    assert!(size <= STRIDE, "scratch heaps are limited to 16 GiB");
    let desc = HeapDescriptor {
        heap_id: HeapId(u64::MAX - n),
        base: SCRATCH_BASE + n * STRIDE,
        size,
        backing: format!("scratch-{}-{n}", std::process::id()),
    };
    let m = HeapMapping::map_pool(&desc, pool_dir, true)?;
    // The file is not needed once mapped.
    if let Some(p) = m.backing_path() {
        let _ = std::fs::remove_file(p);
    }
    Ok(m)
}
