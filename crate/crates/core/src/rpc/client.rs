//! Client side: connecting to a channel and issuing calls.

use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crossbeam::channel::Receiver;

use super::busywait::{BusyWait, LoadMonitor};
use super::ctl::{self, ChannelCtl, ConnCtl};
use super::ring::{flags, state, CallTable, MessageRing, RpcMessage};
use super::*;
use crate::config::host_page_size;
use crate::fallback::{self, client_hello, CopyError, Frame, LayoutRegistry, Session, SessionEvents, Side};
use crate::heap::{Scope, SharedHeap, ShmPtr};
use crate::orchestrator::{ChannelRecord, FailureNotification, HeapMode};
use crate::runtime::NodeRuntime;
use crate::seal::{Role, SealRing, SealToken};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum TransportChoice {
    /// Shared memory when the server is in our pool, the fallback otherwise.
    #[default]
    Auto,
    SharedMemory,
    Fallback,
}

#[derive(Debug, Clone)]
pub struct ConnectOptions {
    pub transport: TransportChoice,
    /// Calls that may be outstanding at once.
    pub max_inflight: u32,
    pub connect_timeout: Duration,
    /// Give up on a call after this long; `None` waits for the server or a
    /// failure notification.
    pub call_timeout: Option<Duration>,
}

impl Default for ConnectOptions {
    fn default() -> Self {
        Self {
            transport: TransportChoice::Auto,
            max_inflight: 64,
            connect_timeout: Duration::from_secs(10),
            call_timeout: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallOptions {
    /// Seal the scope for the duration of the call.
    pub seal: bool,
    /// Ask the server to run the handler in a sandbox confined to the scope.
    pub sandbox: bool,
}

impl CallOptions {
    pub const SECURE: Self = Self {
        seal: true,
        sandbox: true,
    };
}

enum Link {
    Shm {
        ring: MessageRing,
        ctl: ShmPtr<ConnCtl>,
        chan: ShmPtr<ChannelCtl>,
        own_heap: bool,
    },
    Fallback {
        session: Arc<Session>,
        dead: Arc<AtomicBool>,
    },
}

/// A connection to one channel. Calls may be issued from several threads.
pub struct Connection {
    rt: NodeRuntime,
    record: ChannelRecord,
    heap: SharedHeap,
    link: Link,
    calls: Arc<CallTable>,
    seals: Arc<SealRing>,
    free: Mutex<Vec<u32>>,
    freed: Condvar,
    seq: AtomicU64,
    monitor: Arc<LoadMonitor>,
    failures: Receiver<FailureNotification>,
    server_failed: AtomicBool,
    call_timeout: Option<Duration>,
}

impl Connection {
    pub fn connect(rt: &NodeRuntime, channel: &str) -> Result<Self, RpcError> {
        Self::connect_with(rt, channel, ConnectOptions::default())
    }

    pub fn connect_with(rt: &NodeRuntime, channel: &str, opts: ConnectOptions) -> Result<Self, RpcError> {
        let record = rt.orchestrator().lookup_channel(channel)?;
        let same_pool = rt
            .config()
            .pool_id
            .as_deref()
            .is_some_and(|p| !p.is_empty() && p == record.pool);
        let shm = match opts.transport {
            TransportChoice::Auto => same_pool,
            TransportChoice::SharedMemory if !same_pool => return Err(RpcError::Unreachable(channel.into())),
            TransportChoice::SharedMemory => true,
            TransportChoice::Fallback => false,
        };
        let failures = rt.failures();
        let max = opts.max_inflight.max(1);
        let (heap, link, calls, seals) = if shm {
            connect_shm(rt, &record, max, opts.connect_timeout)?
        } else {
            connect_fallback(rt, &record, max, opts.connect_timeout)?
        };
        Ok(Self {
            rt: rt.clone(),
            record,
            heap,
            link,
            calls,
            seals,
            free: Mutex::new((0..max).rev().collect()),
            freed: Condvar::new(),
            seq: AtomicU64::new(0),
            monitor: LoadMonitor::global(),
            failures,
            server_failed: AtomicBool::new(false),
            call_timeout: opts.call_timeout,
        })
    }

    pub fn record(&self) -> &ChannelRecord {
        &self.record
    }

    /// The connection heap. Call arguments must point into it.
    pub fn heap(&self) -> &SharedHeap {
        &self.heap
    }

    pub fn transport(&self) -> Transport {
        match self.link {
            Link::Shm { .. } => Transport::SharedMemory,
            Link::Fallback { .. } => Transport::Fallback,
        }
    }

    /// The fallback session, for statistics and audits.
    pub fn session(&self) -> Option<&Arc<Session>> {
        match &self.link {
            Link::Fallback { session, .. } => Some(session),
            Link::Shm { .. } => None,
        }
    }

    /// This connection's seal ring, for use with a
    /// [`ScopePool`](crate::seal::ScopePool).
    pub fn seal_ring(&self) -> &Arc<SealRing> {
        &self.seals
    }

    pub fn create_scope(&self, size: u64) -> Result<Scope, RpcError> {
        Ok(self.heap.create_scope(size)?)
    }

    /// Plain call: `arg` is a pointer into the connection heap, or 0.
    pub fn call(&self, function: u32, arg: u64) -> Result<u64, RpcError> {
        self.invoke(function, arg, None, 0, None)
    }

    /// Call whose arguments live in `scope`. A sealed scope is released once
    /// the server answers.
    pub fn call_scoped(&self, function: u32, arg: u64, scope: &Scope, opts: CallOptions) -> Result<u64, RpcError> {
        let (r, token) = self.call_deferred(function, arg, scope, opts)?;
        if let Some(t) = token {
            self.seals.release(t)?;
        }
        r
    }

    /// Sealed and sandboxed call.
    pub fn call_secure(&self, function: u32, arg: u64, scope: &Scope) -> Result<u64, RpcError> {
        self.call_scoped(function, arg, scope, CallOptions::SECURE)
    }

    /// Like [`Connection::call_scoped`] but leaves a seal in place; the
    /// caller releases the returned token, typically in a batch.
    pub fn call_deferred(
        &self,
        function: u32,
        arg: u64,
        scope: &Scope,
        opts: CallOptions,
    ) -> Result<(Result<u64, RpcError>, Option<SealToken>), RpcError> {
        let mut fl = 0;
        if opts.sandbox {
            fl |= flags::SANDBOX;
        }
        let token = if opts.seal {
            fl |= flags::SEALED;
            Some(self.seals.seal(scope.start(), scope.len())?)
        } else {
            None
        };
        let r = self.invoke(function, arg, Some((scope.start(), scope.len())), fl, token);
        Ok((r, token))
    }

    /// Deep-copies the structure at `root` from another heap into this
    /// connection's heap and returns the copy's address.
    pub fn copy_from(&self, root: u64, layout: &str, reg: &LayoutRegistry) -> Result<u64, CopyError> {
        fallback::deep_copy(&self.heap, root, layout, reg)
    }

    fn take_slot(&self) -> u32 {
        let mut free = self.free.lock().unwrap();
        loop {
            if let Some(s) = free.pop() {
                return s;
            }
            free = self.freed.wait(free).unwrap();
        }
    }

    fn put_slot(&self, s: u32) {
        self.free.lock().unwrap().push(s);
        self.freed.notify_one();
    }

    fn invoke(
        &self,
        function: u32,
        arg: u64,
        scope: Option<(u64, u64)>,
        fl: u32,
        token: Option<SealToken>,
    ) -> Result<u64, RpcError> {
        if function >= FIRST_RESERVED_FUNCTION {
            return Err(RpcError::ReservedFunction(function));
        }
        let slot = self.take_slot();
        let r = self.invoke_in(slot, function, arg, scope, fl, token);
        self.put_slot(slot);
        r
    }

    fn invoke_in(
        &self,
        slot: u32,
        function: u32,
        arg: u64,
        scope: Option<(u64, u64)>,
        fl: u32,
        token: Option<SealToken>,
    ) -> Result<u64, RpcError> {
        let rec = self.calls.get(slot).expect("slot from the free list");
        let seq = self.seq.fetch_add(1, Ordering::Relaxed) + 1;
        rec.state.store(state::PENDING, Ordering::Relaxed);
        rec.sequence.store(seq, Ordering::Release);
        let (scope_start, scope_len) = scope.unwrap_or((0, 0));
        let msg = RpcMessage {
            sequence: seq,
            function,
            flags: fl,
            arg,
            scope_start,
            scope_len,
            seal_index: token.map_or(0, |t| t.index),
            call_slot: slot,
            seal_epoch: token.map_or(0, |t| t.epoch),
        };
        let started = Instant::now();
        let mut wait = BusyWait::new(self.rt.config().busy_wait, self.monitor.clone());
        match &self.link {
            Link::Shm { ring, .. } => {
                while !ring.try_push(&msg) {
                    self.check_alive(started)?;
                    wait.idle();
                }
                wait.reset();
            }
            Link::Fallback { session, .. } => {
                let mut frames = Vec::with_capacity(2);
                if let Some(t) = token {
                    frames.push(Frame::SealInfo(self.seals.image(t.index).ok_or(RpcError::BadArgument)?));
                }
                frames.push(Frame::RpcReq(msg));
                session
                    .send_all(&frames)
                    .map_err(|e| RpcError::Transport(e.to_string()))?;
            }
        }
        let mut polls = 0u32;
        loop {
            let s = rec.state.load(Ordering::Acquire);
            if s == state::COMPLETE || s == state::ERROR {
                break;
            }
            polls = polls.wrapping_add(1);
            if polls % 64 == 0 {
                self.check_alive(started)?;
            }
            wait.idle();
        }
        let code = rec.code.load(Ordering::Relaxed);
        let ret = rec.ret.load(Ordering::Relaxed);
        rec.state.store(state::IDLE, Ordering::Relaxed);
        if code == 0 {
            Ok(ret)
        } else {
            Err(RpcError::from_code(code, function))
        }
    }

    fn check_alive(&self, started: Instant) -> Result<(), RpcError> {
        while let Ok(n) = self.failures.try_recv() {
            if n.failed == self.record.server {
                self.server_failed.store(true, Ordering::Release);
            }
        }
        if self.server_failed.load(Ordering::Acquire) {
            return Err(RpcError::Transport(format!("server {} failed", self.record.server)));
        }
        match &self.link {
            Link::Shm { chan, .. } => {
                // SAFETY: the channel heap stays mapped while we hold it.
                if unsafe { chan.as_ref() }.closing.load(Ordering::Acquire) != 0 {
                    return Err(RpcError::Shutdown);
                }
            }
            Link::Fallback { dead, .. } => {
                if dead.load(Ordering::Acquire) {
                    return Err(RpcError::Transport("fallback session closed".into()));
                }
            }
        }
        if self.call_timeout.is_some_and(|t| started.elapsed() > t) {
            return Err(RpcError::Transport("call timed out".into()));
        }
        Ok(())
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        let bye = RpcMessage {
            function: FN_DISCONNECT,
            ..Default::default()
        };
        match &self.link {
            Link::Shm {
                ring, ctl, own_heap, ..
            } => {
                let until = Instant::now() + Duration::from_millis(100);
                while !ring.try_push(&bye) && Instant::now() < until {
                    std::thread::yield_now();
                }
                // SAFETY: the connection heap is still mapped.
                unsafe { ctl.as_ref() }.closed.store(1, Ordering::Release);
                if *own_heap {
                    if let Err(e) = self.rt.unmap_heap(self.heap.mapping().heap_id()) {
                        log::debug!("unmapping connection heap: {e}");
                    }
                }
            }
            Link::Fallback { session, .. } => {
                let _ = session.send(&Frame::RpcReq(bye));
                session.close();
                if let Err(e) = self.rt.unmap_heap(self.heap.mapping().heap_id()) {
                    log::debug!("unmapping fallback heap: {e}");
                }
            }
        }
    }
}

type Parts = (SharedHeap, Link, Arc<CallTable>, Arc<SealRing>);

fn connect_shm(rt: &NodeRuntime, record: &ChannelRecord, max: u32, timeout: Duration) -> Result<Parts, RpcError> {
    let chan_map = rt.attach_heap(record.heaps[0].heap_id)?;
    let chan_heap = SharedHeap::open(chan_map)?;
    let root = chan_heap.root(0)?;
    if root % 8 != 0 || !chan_heap.mapping().contains_range(root, std::mem::size_of::<ChannelCtl>() as u64) {
        return Err(RpcError::Transport(format!("channel {} has no control block", record.name)));
    }
    let chan: ShmPtr<ChannelCtl> = ShmPtr::from_addr(root);
    // SAFETY: checked to lie in the mapped channel heap.
    let c = unsafe { chan.as_ref() };
    if !c.is_ready() || c.closing.load(Ordering::Acquire) != 0 {
        return Err(RpcError::Transport(format!("channel {} is not accepting", record.name)));
    }
    // SAFETY: written by the server before it published the magic.
    let accept = unsafe { MessageRing::open(c.accept_ring) }?;
    let (heap, own_heap) = match record.heap_mode {
        HeapMode::PerConnection => {
            let map = rt.alloc_heap(record.heaps[0].size, Some(record.channel_id))?;
            let id = map.heap_id();
            match SharedHeap::format(map) {
                Ok(h) => (h, true),
                Err(e) => {
                    let _ = rt.unmap_heap(id);
                    return Err(e.into());
                }
            }
        }
        HeapMode::ChannelWide => (chan_heap.clone(), false),
    };
    let r = handshake(rt, &heap, accept, chan, max, timeout);
    if r.is_err() && own_heap {
        let _ = rt.unmap_heap(heap.mapping().heap_id());
    }
    let (ring, ctl, calls, seals) = r?;
    Ok((
        heap,
        Link::Shm {
            ring,
            ctl,
            chan,
            own_heap,
        },
        Arc::new(calls),
        Arc::new(seals),
    ))
}

fn handshake(
    rt: &NodeRuntime,
    heap: &SharedHeap,
    accept: MessageRing,
    chan: ShmPtr<ChannelCtl>,
    max: u32,
    timeout: Duration,
) -> Result<(MessageRing, ShmPtr<ConnCtl>, CallTable, SealRing), RpcError> {
    let cfg = rt.config();
    let ring = MessageRing::create(heap, cfg.message_ring_capacity as u64)?;
    let calls = CallTable::create(heap, max)?;
    let seals = SealRing::create(heap, cfg.seal_ring_capacity)?;
    let addr = heap.alloc(std::mem::size_of::<ConnCtl>() as u64, 64)?;
    let ctl: ShmPtr<ConnCtl> = ShmPtr::from_addr(addr);
    // SAFETY: fresh allocation of the right size and alignment.
    unsafe {
        std::ptr::write(
            ctl.as_ptr(),
            ConnCtl {
                magic: AtomicU64::new(0),
                conn_id: AtomicU64::new(0),
                req_ring: ring.addr(),
                calls: calls.addr(),
                calls_capacity: max,
                seal_capacity: seals.capacity(),
                seal_ring: seals.addr(),
                accepted: Default::default(),
                closed: Default::default(),
                heap_id: heap.mapping().heap_id().0,
            },
        );
        ctl.as_ref().magic.store(ctl::magic_word(ctl::CONN_MAGIC), Ordering::Release);
    }
    let hello = RpcMessage {
        function: FN_CONNECT,
        arg: addr,
        scope_start: heap.mapping().heap_id().0,
        ..Default::default()
    };
    let until = Instant::now() + timeout;
    // SAFETY: both blocks stay mapped for the duration.
    let (c, ch) = unsafe { (ctl.as_ref(), chan.as_ref()) };
    while !accept.try_push(&hello) {
        if Instant::now() > until || ch.closing.load(Ordering::Acquire) != 0 {
            return Err(RpcError::Transport("channel accept queue stayed full".into()));
        }
        std::thread::sleep(Duration::from_micros(100));
    }
    loop {
        match c.accepted.load(Ordering::Acquire) {
            ctl::ACCEPT_OK => break,
            ctl::ACCEPT_REFUSED => return Err(RpcError::Transport("server refused the connection".into())),
            _ => {}
        }
        if Instant::now() > until {
            return Err(RpcError::Transport("server did not accept in time".into()));
        }
        if ch.closing.load(Ordering::Acquire) != 0 {
            return Err(RpcError::Shutdown);
        }
        std::thread::sleep(Duration::from_micros(50));
    }
    Ok((ring, ctl, calls, seals))
}

struct ClientEvents {
    calls: Arc<CallTable>,
    seals: Mutex<Option<std::sync::Weak<SealRing>>>,
    dead: Arc<AtomicBool>,
}

impl SessionEvents for ClientEvents {
    fn frame(&self, _session: &Session, frame: Frame) {
        match frame {
            Frame::RpcResp {
                call_slot,
                code,
                sequence,
                ret,
            } => {
                if let Some(r) = self.calls.get(call_slot) {
                    r.finish(sequence, code, ret);
                }
            }
            Frame::SealInfo(img) => {
                let ring = self.seals.lock().unwrap().as_ref().and_then(|w| w.upgrade());
                if let Some(ring) = ring {
                    if let Err(e) = ring.apply_image(img) {
                        log::warn!("seal image from server: {e}");
                    }
                }
            }
            f => log::debug!("unexpected frame type {} from fallback server", f.kind()),
        }
    }

    fn closed(&self, _session: &Session) {
        self.dead.store(true, Ordering::Release);
    }
}

fn connect_fallback(rt: &NodeRuntime, record: &ChannelRecord, max: u32, timeout: Duration) -> Result<Parts, RpcError> {
    let ep = record
        .fallback_endpoint
        .as_deref()
        .ok_or_else(|| RpcError::Unreachable(record.name.clone()))?;
    let addr = ep
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| RpcError::Unreachable(record.name.clone()))?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    let desc = client_hello(&mut stream, &record.name, rt.holder(), host_page_size() as u32)?;
    stream.set_read_timeout(None)?;
    let map = rt.attach_mirror_heap(&desc)?;
    let id = map.heap_id();
    let built = (|| -> Result<Parts, RpcError> {
        let calls = Arc::new(CallTable::local(max));
        let seals = Arc::new(SealRing::local(map.clone(), rt.config().seal_ring_capacity, Role::Sender)?);
        let dead = Arc::new(AtomicBool::new(false));
        let events = Arc::new(ClientEvents {
            calls: calls.clone(),
            seals: Mutex::new(Some(Arc::downgrade(&seals))),
            dead: dead.clone(),
        });
        let session = Session::establish(stream, map.clone(), Side::Client, events)?;
        let heap = match SharedHeap::open(map.clone()) {
            Ok(h) => h,
            Err(e) => {
                session.close();
                return Err(e.into());
            }
        };
        Ok((heap, Link::Fallback { session, dead }, calls, seals))
    })();
    if built.is_err() {
        drop(map);
        let _ = rt.unmap_heap(id);
    }
    built
}
