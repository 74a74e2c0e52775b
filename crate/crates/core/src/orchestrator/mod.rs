//! Global registry of channels, heap address ranges, leases and quotas.
//!
//! [`Orchestrator`] is the transport-independent state machine. It is served
//! over TCP by [`server::OrchestratorServer`] and reached from node runtimes
//! through the [`Orchestration`] trait, implemented both by the remote
//! [`client::OrchestratorClient`] and by the in-process [`LocalOrchestrator`].

mod addr;
pub mod client;
mod clock;
pub mod server;
pub mod wire;

pub use addr::AddressSpace;
pub use client::OrchestratorClient;
pub use clock::{Clock, ManualClock, SystemClock};
pub use server::OrchestratorServer;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crossbeam::channel::{Receiver, Sender};

use crate::config::OrchestratorConfig;
use crate::ids::{ChannelId, HeapId, HolderId, LeaseId};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OrchError {
    #[error("channel name {0:?} already registered")]
    DuplicateName(String),
    #[error("malformed channel name {0:?}")]
    MalformedName(String),
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),
    #[error("unknown heap {0}")]
    UnknownHeap(HeapId),
    #[error("unknown lease {0}")]
    UnknownLease(LeaseId),
    #[error("lease {0} has expired; the heap must be remapped")]
    LeaseExpired(LeaseId),
    #[error("quota exceeded: {current} of {limit} bytes mapped; return unused heaps first")]
    QuotaExceeded { current: u64, limit: u64 },
    #[error("shared pool exhausted")]
    PoolExhausted,
    #[error("heap size must be positive")]
    InvalidSize,
    #[error("access to channel {0:?} denied")]
    AclDenied(String),
    #[error("holder {holder} does not hold heap {heap}")]
    NotHolder { heap: HeapId, holder: HolderId },
    #[error("only the creating process may close channel {0:?}")]
    NotOwner(String),
    #[error("orchestrator unreachable: {0}")]
    Unreachable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// How connections of a channel obtain heaps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeapMode {
    /// Every connection gets its own heap.
    PerConnection,
    /// All connections share the channel's heap.
    ChannelWide,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeapDescriptor {
    pub heap_id: HeapId,
    pub base: u64,
    pub size: u64,
    pub backing: String,
}

impl HeapDescriptor {
    pub fn end(&self) -> u64 {
        self.base + self.size
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr < self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lease {
    pub lease_id: LeaseId,
    pub heap_id: HeapId,
    pub holder: HolderId,
    pub issued: Duration,
    pub expiry: Duration,
    /// Length added to "now" on each renewal.
    pub term: Duration,
}

/// Lease as seen by a remote holder: times are relative to the grant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeaseGrant {
    pub lease_id: LeaseId,
    pub heap_id: HeapId,
    pub remaining: Duration,
    pub term: Duration,
}

impl From<&Lease> for LeaseGrant {
    fn from(l: &Lease) -> Self {
        Self {
            lease_id: l.lease_id,
            heap_id: l.heap_id,
            remaining: l.expiry.saturating_sub(l.issued),
            term: l.term,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelOptions {
    pub heap_mode: HeapMode,
    pub initial_heap_size: u64,
    /// Pool identity of the creating node; clients with the same pool use
    /// shared memory, all others use the fallback endpoint.
    pub pool: String,
    pub fallback_endpoint: Option<String>,
    /// Nodes admitted to the channel; empty admits everyone.
    pub allow_nodes: Vec<u32>,
}

impl ChannelOptions {
    pub fn new(heap_mode: HeapMode, initial_heap_size: u64) -> Self {
        Self {
            heap_mode,
            initial_heap_size,
            pool: String::new(),
            fallback_endpoint: None,
            allow_nodes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelRecord {
    pub channel_id: ChannelId,
    pub name: String,
    pub heap_mode: HeapMode,
    pub server: HolderId,
    pub pool: String,
    pub fallback_endpoint: Option<String>,
    pub allow_nodes: Vec<u32>,
    pub heaps: Vec<HeapDescriptor>,
}

impl ChannelRecord {
    pub fn admits(&self, holder: HolderId) -> bool {
        self.allow_nodes.is_empty() || self.allow_nodes.contains(&holder.node)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuotaDecision {
    Allow,
    Deny { current: u64, limit: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FailureNotification {
    pub recipient: HolderId,
    pub failed: HolderId,
    pub heap_id: HeapId,
    pub channel: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerEntry {
    pub quota: u64,
    pub mapped: u64,
}

#[derive(Debug)]
struct HeapEntry {
    desc: HeapDescriptor,
    holders: BTreeSet<HolderId>,
    channel: Option<ChannelId>,
}

#[derive(Debug)]
struct ChannelEntry {
    record: ChannelRecord,
}

/// The orchestrator's authoritative state.
pub struct Orchestrator<C: Clock = SystemClock> {
    cfg: OrchestratorConfig,
    clock: C,
    space: AddressSpace,
    channels: BTreeMap<String, ChannelEntry>,
    channel_names: HashMap<ChannelId, String>,
    heaps: BTreeMap<HeapId, HeapEntry>,
    leases: HashMap<LeaseId, Lease>,
    lease_of: HashMap<(HeapId, HolderId), LeaseId>,
    ledger: HashMap<HolderId, LedgerEntry>,
    next_channel: u64,
    next_heap: u64,
    next_lease: u64,
}

pub fn validate_channel_name(name: &str) -> Result<(), OrchError> {
    let ok = name.starts_with('/')
        && name.len() > 1
        && name[1..].split('/').all(|seg| !seg.is_empty())
        && name.len() <= u16::MAX as usize;
    if ok {
        Ok(())
    } else {
        Err(OrchError::MalformedName(name.to_string()))
    }
}

impl Orchestrator<SystemClock> {
    pub fn new(cfg: OrchestratorConfig) -> Self {
        Self::with_clock(cfg, SystemClock::new())
    }
}

impl<C: Clock> Orchestrator<C> {
    pub fn with_clock(cfg: OrchestratorConfig, clock: C) -> Self {
        let space = AddressSpace::new(cfg.pool_base, cfg.pool_span);
        Self {
            cfg,
            clock,
            space,
            channels: BTreeMap::new(),
            channel_names: HashMap::new(),
            heaps: BTreeMap::new(),
            leases: HashMap::new(),
            lease_of: HashMap::new(),
            ledger: HashMap::new(),
            next_channel: 1,
            next_heap: 1,
            next_lease: 1,
        }
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.cfg
    }

    pub fn now(&self) -> Duration {
        self.clock.now()
    }

    fn round_to_page(&self, size: u64) -> Result<u64, OrchError> {
        if size == 0 {
            return Err(OrchError::InvalidSize);
        }
        let p = self.cfg.page_size;
        size.checked_add(p - 1)
            .map(|s| s / p * p)
            .ok_or(OrchError::InvalidSize)
    }

    fn entry(&mut self, holder: HolderId) -> &mut LedgerEntry {
        let quota = self.cfg.quota_for(holder);
        self.ledger
            .entry(holder)
            .or_insert(LedgerEntry { quota, mapped: 0 })
    }

    pub fn ledger_entry(&self, holder: HolderId) -> LedgerEntry {
        self.ledger.get(&holder).copied().unwrap_or(LedgerEntry {
            quota: self.cfg.quota_for(holder),
            mapped: 0,
        })
    }

    pub fn set_quota(&mut self, holder: HolderId, quota: u64) {
        self.entry(holder).quota = quota;
    }

    /// Would mapping `additional` more bytes keep `holder` within quota?
    pub fn check_quota(&mut self, holder: HolderId, additional: u64) -> QuotaDecision {
        let e = *self.entry(holder);
        match e.mapped.checked_add(additional) {
            Some(total) if total <= e.quota => QuotaDecision::Allow,
            _ => QuotaDecision::Deny {
                current: e.mapped,
                limit: e.quota,
            },
        }
    }

    fn grant_lease(&mut self, heap_id: HeapId, holder: HolderId) -> Lease {
        let now = self.clock.now();
        let term = self.cfg.lease_term();
        let lease = Lease {
            lease_id: LeaseId(self.next_lease),
            heap_id,
            holder,
            issued: now,
            expiry: now + term,
            term,
        };
        self.next_lease += 1;
        self.leases.insert(lease.lease_id, lease.clone());
        self.lease_of.insert((heap_id, holder), lease.lease_id);
        lease
    }

    /// Allocates a fresh heap, charged and leased to `holder`.
    pub fn allocate_heap(
        &mut self,
        size: u64,
        holder: HolderId,
    ) -> Result<(HeapDescriptor, Lease), OrchError> {
        let size = self.round_to_page(size)?;
        if let QuotaDecision::Deny { current, limit } = self.check_quota(holder, size) {
            return Err(OrchError::QuotaExceeded { current, limit });
        }
        let base = self.space.allocate(size).ok_or(OrchError::PoolExhausted)?;
        let heap_id = HeapId(self.next_heap);
        self.next_heap += 1;
        let desc = HeapDescriptor {
            heap_id,
            base,
            size,
            backing: format!("heap-{}", heap_id.0),
        };
        self.heaps.insert(
            heap_id,
            HeapEntry {
                desc: desc.clone(),
                holders: BTreeSet::from([holder]),
                channel: None,
            },
        );
        self.entry(holder).mapped += size;
        let lease = self.grant_lease(heap_id, holder);
        Ok((desc, lease))
    }

    /// Another process maps an existing heap: charged to its quota and leased.
    ///
    /// Attaching a heap the holder already maps returns its current lease.
    pub fn attach_heap(
        &mut self,
        heap_id: HeapId,
        holder: HolderId,
    ) -> Result<(HeapDescriptor, Lease), OrchError> {
        let entry = self.heaps.get(&heap_id).ok_or(OrchError::UnknownHeap(heap_id))?;
        let desc = entry.desc.clone();
        if let Some(id) = self.lease_of.get(&(heap_id, holder)) {
            return Ok((desc, self.leases[id].clone()));
        }
        if let Some(ch) = entry.channel {
            let name = &self.channel_names[&ch];
            if !self.channels[name].record.admits(holder) {
                return Err(OrchError::AclDenied(name.clone()));
            }
        }
        if let QuotaDecision::Deny { current, limit } = self.check_quota(holder, desc.size) {
            return Err(OrchError::QuotaExceeded { current, limit });
        }
        self.heaps.get_mut(&heap_id).unwrap().holders.insert(holder);
        self.entry(holder).mapped += desc.size;
        let lease = self.grant_lease(heap_id, holder);
        Ok((desc, lease))
    }

    /// Associates an extra heap (e.g. a per-connection heap) with a channel.
    pub fn link_heap(&mut self, channel: ChannelId, heap_id: HeapId) -> Result<(), OrchError> {
        let name = self
            .channel_names
            .get(&channel)
            .cloned()
            .ok_or_else(|| OrchError::UnknownChannel(format!("#{}", channel.0)))?;
        let entry = self.heaps.get_mut(&heap_id).ok_or(OrchError::UnknownHeap(heap_id))?;
        entry.channel = Some(channel);
        let desc = entry.desc.clone();
        let rec = &mut self.channels.get_mut(&name).unwrap().record;
        if !rec.heaps.iter().any(|h| h.heap_id == heap_id) {
            rec.heaps.push(desc);
        }
        Ok(())
    }

    pub fn register_channel(
        &mut self,
        name: &str,
        opts: ChannelOptions,
        creator: HolderId,
    ) -> Result<(ChannelRecord, Lease), OrchError> {
        validate_channel_name(name)?;
        if self.channels.contains_key(name) {
            return Err(OrchError::DuplicateName(name.to_string()));
        }
        let (desc, lease) = self.allocate_heap(opts.initial_heap_size, creator)?;
        let channel_id = ChannelId(self.next_channel);
        self.next_channel += 1;
        self.heaps.get_mut(&desc.heap_id).unwrap().channel = Some(channel_id);
        let record = ChannelRecord {
            channel_id,
            name: name.to_string(),
            heap_mode: opts.heap_mode,
            server: creator,
            pool: opts.pool,
            fallback_endpoint: opts.fallback_endpoint,
            allow_nodes: opts.allow_nodes,
            heaps: vec![desc],
        };
        self.channel_names.insert(channel_id, name.to_string());
        self.channels.insert(
            name.to_string(),
            ChannelEntry {
                record: record.clone(),
            },
        );
        Ok((record, lease))
    }

    pub fn lookup_channel(&self, name: &str, caller: HolderId) -> Result<ChannelRecord, OrchError> {
        let entry = self
            .channels
            .get(name)
            .ok_or_else(|| OrchError::UnknownChannel(name.to_string()))?;
        if !entry.record.admits(caller) {
            return Err(OrchError::AclDenied(name.to_string()));
        }
        Ok(entry.record.clone())
    }

    /// Removes the channel from the registry. The closer gives up its leases
    /// on the channel's heaps; other holders keep theirs.
    pub fn close_channel(&mut self, name: &str, holder: HolderId) -> Result<(), OrchError> {
        let entry = self
            .channels
            .get(name)
            .ok_or_else(|| OrchError::UnknownChannel(name.to_string()))?;
        if entry.record.server != holder {
            return Err(OrchError::NotOwner(name.to_string()));
        }
        let entry = self.channels.remove(name).unwrap();
        self.channel_names.remove(&entry.record.channel_id);
        for h in &entry.record.heaps {
            if let Some(he) = self.heaps.get_mut(&h.heap_id) {
                he.channel = None;
            }
            if self.lease_of.contains_key(&(h.heap_id, holder)) {
                self.release_heap(h.heap_id, holder)?;
            }
        }
        Ok(())
    }

    fn drop_holder(&mut self, heap_id: HeapId, holder: HolderId) {
        if let Some(id) = self.lease_of.remove(&(heap_id, holder)) {
            self.leases.remove(&id);
        }
        let size = match self.heaps.get_mut(&heap_id) {
            Some(entry) => {
                entry.holders.remove(&holder);
                entry.desc.size
            }
            None => return,
        };
        let e = self.entry(holder);
        e.mapped = e.mapped.saturating_sub(size);
    }

    /// Frees a heap nobody holds any more and returns its range to the pool.
    fn reclaim_if_orphaned(&mut self, heap_id: HeapId) -> bool {
        let orphaned = self
            .heaps
            .get(&heap_id)
            .is_some_and(|e| e.holders.is_empty());
        if !orphaned {
            return false;
        }
        let entry = self.heaps.remove(&heap_id).unwrap();
        self.space.release(entry.desc.base, entry.desc.size);
        if let Some(ch) = entry.channel {
            if let Some(name) = self.channel_names.get(&ch).cloned() {
                let rec = &mut self.channels.get_mut(&name).unwrap().record;
                rec.heaps.retain(|h| h.heap_id != heap_id);
                if rec.heaps.is_empty() {
                    self.channels.remove(&name);
                    self.channel_names.remove(&ch);
                }
            }
        }
        true
    }

    /// Voluntary unmap: lease dropped, quota refunded, heap reclaimed if it
    /// was the last holder.
    pub fn release_heap(&mut self, heap_id: HeapId, holder: HolderId) -> Result<bool, OrchError> {
        if !self.heaps.contains_key(&heap_id) {
            return Err(OrchError::UnknownHeap(heap_id));
        }
        if !self.lease_of.contains_key(&(heap_id, holder)) {
            return Err(OrchError::NotHolder { heap: heap_id, holder });
        }
        self.drop_holder(heap_id, holder);
        Ok(self.reclaim_if_orphaned(heap_id))
    }

    pub fn renew_lease(&mut self, lease_id: LeaseId) -> Result<Duration, OrchError> {
        let now = self.clock.now();
        let lease = self
            .leases
            .get_mut(&lease_id)
            .ok_or(OrchError::UnknownLease(lease_id))?;
        if lease.expiry < now {
            return Err(OrchError::LeaseExpired(lease_id));
        }
        lease.expiry = now + lease.term;
        Ok(lease.expiry)
    }

    pub fn lease(&self, lease_id: LeaseId) -> Option<&Lease> {
        self.leases.get(&lease_id)
    }

    /// Expires overdue leases, notifies surviving co-holders, reclaims orphans.
    pub fn expire_sweep(&mut self, now: Duration) -> Vec<FailureNotification> {
        let mut expired: Vec<Lease> = self
            .leases
            .values()
            .filter(|l| l.expiry < now)
            .cloned()
            .collect();
        if expired.is_empty() {
            return Vec::new();
        }
        expired.sort_by_key(|l| l.lease_id);
        for l in &expired {
            self.drop_holder(l.heap_id, l.holder);
        }
        let mut notes = Vec::new();
        for l in &expired {
            let Some(entry) = self.heaps.get(&l.heap_id) else {
                continue;
            };
            let channel = entry
                .channel
                .and_then(|c| self.channel_names.get(&c).cloned());
            for &recipient in &entry.holders {
                notes.push(FailureNotification {
                    recipient,
                    failed: l.holder,
                    heap_id: l.heap_id,
                    channel: channel.clone(),
                });
            }
        }
        let heaps: BTreeSet<HeapId> = expired.iter().map(|l| l.heap_id).collect();
        for h in heaps {
            self.reclaim_if_orphaned(h);
        }
        notes
    }

    pub fn heap(&self, heap_id: HeapId) -> Option<&HeapDescriptor> {
        self.heaps.get(&heap_id).map(|e| &e.desc)
    }

    pub fn holders(&self, heap_id: HeapId) -> Vec<HolderId> {
        self.heaps
            .get(&heap_id)
            .map(|e| e.holders.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn live_heaps(&self) -> Vec<HeapDescriptor> {
        self.heaps.values().map(|e| e.desc.clone()).collect()
    }

    pub fn pool_free_bytes(&self) -> u64 {
        self.space.free_bytes()
    }
}

/// What a node runtime needs from the orchestrator, local or remote.
pub trait Orchestration: Send + Sync {
    fn holder(&self) -> HolderId;
    fn register_channel(
        &self,
        name: &str,
        opts: ChannelOptions,
    ) -> Result<(ChannelRecord, LeaseGrant), OrchError>;
    fn lookup_channel(&self, name: &str) -> Result<ChannelRecord, OrchError>;
    /// New heap, optionally linked to a channel.
    fn alloc_heap(
        &self,
        size: u64,
        channel: Option<ChannelId>,
    ) -> Result<(HeapDescriptor, LeaseGrant), OrchError>;
    fn attach_heap(&self, heap: HeapId) -> Result<(HeapDescriptor, LeaseGrant), OrchError>;
    /// Returns true when this was the last holder and the heap was reclaimed.
    fn release_heap(&self, heap: HeapId) -> Result<bool, OrchError>;
    fn renew_lease(&self, lease: LeaseId) -> Result<Duration, OrchError>;
    fn check_quota(&self, additional: u64) -> Result<QuotaDecision, OrchError>;
    fn close_channel(&self, name: &str) -> Result<(), OrchError>;
    /// Failure notifications addressed to this holder.
    fn notifications(&self) -> Receiver<FailureNotification>;
}

/// Shared orchestrator state plus per-holder notification mailboxes, used by
/// both the TCP server and in-process handles.
///
/// A notification whose recipient has no live mailbox is kept for one lease
/// term and handed over if the recipient subscribes in that time.
pub struct SharedOrchestrator<C: Clock = SystemClock> {
    state: Mutex<Orchestrator<C>>,
    mailboxes: Mutex<Mailboxes>,
}

#[derive(Default)]
struct Mailboxes {
    live: HashMap<HolderId, Sender<FailureNotification>>,
    pending: Vec<(Duration, FailureNotification)>,
}

impl<C: Clock> SharedOrchestrator<C> {
    pub fn new(orch: Orchestrator<C>) -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(orch),
            mailboxes: Mutex::new(Mailboxes::default()),
        })
    }

    pub fn lock(&self) -> std::sync::MutexGuard<'_, Orchestrator<C>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn boxes(&self) -> std::sync::MutexGuard<'_, Mailboxes> {
        self.mailboxes.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn subscribe(&self, holder: HolderId) -> Receiver<FailureNotification> {
        let (tx, rx) = crossbeam::channel::unbounded();
        let mut boxes = self.boxes();
        let mut keep = Vec::new();
        for (t, n) in std::mem::take(&mut boxes.pending) {
            if n.recipient == holder {
                let _ = tx.send(n);
            } else {
                keep.push((t, n));
            }
        }
        boxes.pending = keep;
        boxes.live.insert(holder, tx);
        rx
    }

    /// Runs one sweep and delivers notifications to subscribed holders.
    /// Returns every notification produced, delivered or not.
    pub fn sweep(&self) -> Vec<FailureNotification> {
        let (notes, now, term) = {
            let mut s = self.lock();
            let now = s.now();
            (s.expire_sweep(now), now, s.config().lease_term())
        };
        let mut boxes = self.boxes();
        boxes.pending.retain(|(t, _)| now.saturating_sub(*t) <= term);
        for n in &notes {
            let sent = boxes
                .live
                .get(&n.recipient)
                .is_some_and(|tx| tx.send(n.clone()).is_ok());
            if !sent {
                boxes.live.remove(&n.recipient);
                boxes.pending.push((now, n.clone()));
            }
        }
        notes
    }

    /// Number of notifications waiting for a recipient to reconnect.
    pub fn undelivered(&self) -> usize {
        self.boxes().pending.len()
    }

    /// Spawns a thread that sweeps every `period` until `self` is dropped.
    pub fn spawn_sweeper(self: &Arc<Self>, period: Duration) -> std::thread::JoinHandle<()>
    where
        C: 'static,
    {
        let weak = Arc::downgrade(self);
        std::thread::Builder::new()
            .name("rpcool-sweep".into())
            .spawn(move || loop {
                std::thread::sleep(period);
                match weak.upgrade() {
                    Some(s) => {
                        s.sweep();
                    }
                    None => break,
                }
            })
            .expect("spawn sweeper")
    }
}

/// In-process [`Orchestration`] handle for one holder.
pub struct LocalOrchestrator<C: Clock = SystemClock> {
    shared: Arc<SharedOrchestrator<C>>,
    holder: HolderId,
    inbox: Receiver<FailureNotification>,
}

impl<C: Clock> LocalOrchestrator<C> {
    pub fn new(shared: Arc<SharedOrchestrator<C>>, holder: HolderId) -> Self {
        let inbox = shared.subscribe(holder);
        Self {
            shared,
            holder,
            inbox,
        }
    }

    pub fn shared(&self) -> &Arc<SharedOrchestrator<C>> {
        &self.shared
    }
}

impl<C: Clock> Orchestration for LocalOrchestrator<C> {
    fn holder(&self) -> HolderId {
        self.holder
    }

    fn register_channel(
        &self,
        name: &str,
        opts: ChannelOptions,
    ) -> Result<(ChannelRecord, LeaseGrant), OrchError> {
        let mut s = self.shared.lock();
        let (rec, lease) = s.register_channel(name, opts, self.holder)?;
        let g = LeaseGrant::from(&lease);
        Ok((rec, g))
    }

    fn lookup_channel(&self, name: &str) -> Result<ChannelRecord, OrchError> {
        self.shared.lock().lookup_channel(name, self.holder)
    }

    fn alloc_heap(
        &self,
        size: u64,
        channel: Option<ChannelId>,
    ) -> Result<(HeapDescriptor, LeaseGrant), OrchError> {
        let mut s = self.shared.lock();
        let (desc, lease) = s.allocate_heap(size, self.holder)?;
        if let Some(ch) = channel {
            s.link_heap(ch, desc.heap_id)?;
        }
        let g = LeaseGrant::from(&lease);
        Ok((desc, g))
    }

    fn attach_heap(&self, heap: HeapId) -> Result<(HeapDescriptor, LeaseGrant), OrchError> {
        let mut s = self.shared.lock();
        let (desc, lease) = s.attach_heap(heap, self.holder)?;
        let g = LeaseGrant::from(&lease);
        Ok((desc, g))
    }

    fn release_heap(&self, heap: HeapId) -> Result<bool, OrchError> {
        self.shared.lock().release_heap(heap, self.holder)
    }

    fn renew_lease(&self, lease: LeaseId) -> Result<Duration, OrchError> {
        let mut s = self.shared.lock();
        let expiry = s.renew_lease(lease)?;
        Ok(expiry.saturating_sub(s.now()))
    }

    fn check_quota(&self, additional: u64) -> Result<QuotaDecision, OrchError> {
        Ok(self.shared.lock().check_quota(self.holder, additional))
    }

    fn close_channel(&self, name: &str) -> Result<(), OrchError> {
        self.shared.lock().close_channel(name, self.holder)
    }

    fn notifications(&self) -> Receiver<FailureNotification> {
        self.inbox.clone()
    }
}

#[cfg(test)]
mod tests;
