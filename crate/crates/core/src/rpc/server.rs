//! Server side of a channel: connection acceptance, handler registry and
//! worker threads.

use std::cell::Cell;
use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam::channel::{Receiver, Sender};

use super::busywait::{BusyWait, LoadMonitor};
use super::ctl::{self, ChannelCtl, ConnCtl};
use super::ring::{CallTable, MessageRing, RpcMessage};
use super::*;
use crate::config::host_page_size;
use crate::fallback::{server_read_hello, Frame, Hello, Session, SessionEvents, Side};
use crate::heap::{Scope, SharedHeap, ShmPtr};
use crate::ids::HeapId;
use crate::orchestrator::{ChannelOptions, ChannelRecord, FailureNotification, HeapMode};
use crate::runtime::fault::perm;
use crate::runtime::NodeRuntime;
use crate::sandbox::Sandbox;
use crate::seal::{Role, SealRing, SealToken};

/// A registered function. Returns a value for the caller or a user error
/// code below [`FIRST_BUILTIN_CODE`].
pub type Handler = Arc<dyn Fn(&CallContext) -> Result<u64, u32> + Send + Sync>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct HandlerOptions {
    /// Refuse calls whose arguments are not sealed.
    pub require_seal: bool,
    /// Always run inside a sandbox confined to the call's scope.
    pub sandbox: bool,
}

#[derive(Debug, Clone)]
pub struct ChannelConfig {
    pub heap_mode: HeapMode,
    /// Size of the channel heap and of each per-connection heap.
    pub heap_size: u64,
    /// Worker threads; `None` takes the runtime's setting.
    pub workers: Option<usize>,
    /// Accept clients outside the pool.
    pub fallback: bool,
    /// Fallback listen address; `None` takes the runtime's setting, then an
    /// ephemeral loopback port.
    pub fallback_listen: Option<String>,
    pub allow_nodes: Vec<u32>,
    pub accept_capacity: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            heap_mode: HeapMode::PerConnection,
            heap_size: 32 << 20,
            workers: None,
            fallback: true,
            fallback_listen: None,
            allow_nodes: Vec::new(),
            accept_capacity: 64,
        }
    }
}

/// What a handler sees of one call.
pub struct CallContext<'a> {
    msg: RpcMessage,
    heap: &'a SharedHeap,
    sealed: bool,
    sandboxed: bool,
    transport: Transport,
    reply: Cell<Option<Result<u64, u32>>>,
}

impl CallContext<'_> {
    pub fn function(&self) -> u32 {
        self.msg.function
    }

    pub fn arg(&self) -> u64 {
        self.msg.arg
    }

    pub fn arg_ptr<T>(&self) -> ShmPtr<T> {
        ShmPtr::from_addr(self.msg.arg)
    }

    pub fn sequence(&self) -> u64 {
        self.msg.sequence
    }

    /// The call's scope range, if it has one.
    pub fn scope_range(&self) -> Option<(u64, u64)> {
        self.msg.scope()
    }

    /// The call's scope, for allocating reply data next to the arguments.
    pub fn scope(&self) -> Option<Scope> {
        let (start, _) = self.msg.scope()?;
        // SAFETY: the dispatcher checked the range lies in the heap; the
        // header's magic is checked before use.
        unsafe { Scope::from_raw(self.heap.clone(), start).ok() }
    }

    pub fn heap(&self) -> &SharedHeap {
        self.heap
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn is_sandboxed(&self) -> bool {
        self.sandboxed
    }

    pub fn transport(&self) -> Transport {
        self.transport
    }

    /// Sets the call's result ahead of returning. The handler's own return
    /// value is then ignored.
    pub fn respond(&self, result: Result<u64, u32>) -> Result<(), RpcError> {
        if let Err(c) = result {
            if c == 0 || c >= FIRST_BUILTIN_CODE {
                return Err(RpcError::CodeOutOfRange(c));
            }
        }
        if self.reply.get().is_some() {
            return Err(RpcError::DoubleRespond);
        }
        self.reply.set(Some(result));
        Ok(())
    }
}

#[derive(Clone)]
struct Entry {
    f: Handler,
    opts: HandlerOptions,
}

struct ShmPeer {
    heap: SharedHeap,
    ring: MessageRing,
    calls: CallTable,
    seals: SealRing,
    /// The heap was attached for this connection alone.
    own_heap: bool,
}

struct FbPeer {
    heap: SharedHeap,
    seals: SealRing,
    session: OnceLock<Arc<Session>>,
}

struct Job {
    peer: Arc<FbPeer>,
    msg: RpcMessage,
}

struct Shared {
    rt: NodeRuntime,
    record: ChannelRecord,
    heap: SharedHeap,
    ctl: ShmPtr<ChannelCtl>,
    accept: MessageRing,
    handlers: RwLock<HashMap<u32, Entry>>,
    conns: Mutex<Vec<Arc<ShmPeer>>>,
    conns_gen: AtomicU64,
    fb_peers: Mutex<Vec<Arc<FbPeer>>>,
    jobs_tx: Sender<Job>,
    jobs_rx: Receiver<Job>,
    failures: Receiver<FailureNotification>,
    listener: Option<(TcpListener, SocketAddr)>,
    monitor: Arc<LoadMonitor>,
    workers: usize,
    stop: AtomicBool,
    served: AtomicU64,
}

/// A channel being served by this process.
pub struct Server {
    shared: Arc<Shared>,
    threads: Mutex<Vec<JoinHandle<()>>>,
    started: AtomicBool,
}

impl Server {
    /// Registers channel `name` and prepares it for clients. Calls are
    /// processed once [`Server::start`] or [`Server::listen`] runs.
    pub fn create(rt: &NodeRuntime, name: &str, cfg: ChannelConfig) -> Result<Self, RpcError> {
        let listener = if cfg.fallback {
            let addr = cfg
                .fallback_listen
                .clone()
                .or_else(|| rt.config().fallback_listen.clone())
                .unwrap_or_else(|| "127.0.0.1:0".into());
            let l = TcpListener::bind(&addr)?;
            let a = l.local_addr()?;
            Some((l, a))
        } else {
            None
        };
        let opts = ChannelOptions {
            heap_mode: cfg.heap_mode,
            initial_heap_size: cfg.heap_size,
            pool: rt.config().pool_id.clone().unwrap_or_default(),
            fallback_endpoint: listener.as_ref().map(|(_, a)| a.to_string()),
            allow_nodes: cfg.allow_nodes.clone(),
        };
        let (record, map) = rt.register_channel(name, opts)?;
        let setup = || -> Result<(SharedHeap, MessageRing, ShmPtr<ChannelCtl>), RpcError> {
            let heap = SharedHeap::format(map)?;
            let accept = MessageRing::create(&heap, cfg.accept_capacity)?;
            let ctl: ShmPtr<ChannelCtl> = ShmPtr::from_addr(heap.alloc(std::mem::size_of::<ChannelCtl>() as u64, 64)?);
            // SAFETY: fresh allocation of the right size and alignment.
            unsafe {
                std::ptr::write(
                    ctl.as_ptr(),
                    ChannelCtl {
                        magic: AtomicU64::new(0),
                        accept_ring: accept.addr(),
                        accept_capacity: accept.capacity(),
                        next_conn: AtomicU64::new(1),
                        closing: Default::default(),
                        _pad: 0,
                    },
                )
            };
            heap.set_root(0, ctl.addr())?;
            // SAFETY: just allocated.
            unsafe { ctl.as_ref() }
                .magic
                .store(ctl::magic_word(ctl::CHANNEL_MAGIC), Ordering::Release);
            Ok((heap, accept, ctl))
        };
        let (heap, accept, ctl) = match setup() {
            Ok(v) => v,
            Err(e) => {
                let _ = rt.orchestrator().close_channel(name);
                let _ = rt.unmap_heap(record.heaps[0].heap_id);
                return Err(e);
            }
        };
        let (jobs_tx, jobs_rx) = crossbeam::channel::unbounded();
        let shared = Arc::new(Shared {
            failures: rt.failures(),
            rt: rt.clone(),
            record,
            heap,
            ctl,
            accept,
            handlers: RwLock::new(HashMap::new()),
            conns: Mutex::new(Vec::new()),
            conns_gen: AtomicU64::new(0),
            fb_peers: Mutex::new(Vec::new()),
            jobs_tx,
            jobs_rx,
            listener,
            monitor: LoadMonitor::global(),
            workers: cfg.workers.unwrap_or(rt.config().workers).max(1),
            stop: AtomicBool::new(false),
            served: AtomicU64::new(0),
        });
        Ok(Self {
            shared,
            threads: Mutex::new(Vec::new()),
            started: AtomicBool::new(false),
        })
    }

    pub fn name(&self) -> &str {
        &self.shared.record.name
    }

    pub fn record(&self) -> &ChannelRecord {
        &self.shared.record
    }

    /// Address clients outside the pool connect to.
    pub fn fallback_addr(&self) -> Option<SocketAddr> {
        self.shared.listener.as_ref().map(|(_, a)| *a)
    }

    /// Calls answered so far.
    pub fn served(&self) -> u64 {
        self.shared.served.load(Ordering::Relaxed)
    }

    /// Live connections over shared memory and over the fallback.
    pub fn connections(&self) -> (usize, usize) {
        (
            self.shared.conns.lock().unwrap().len(),
            self.shared.fb_peers.lock().unwrap().len(),
        )
    }

    pub fn register(
        &self,
        function: u32,
        f: impl Fn(&CallContext) -> Result<u64, u32> + Send + Sync + 'static,
    ) -> Result<(), RpcError> {
        self.register_with(function, HandlerOptions::default(), f)
    }

    pub fn register_with(
        &self,
        function: u32,
        opts: HandlerOptions,
        f: impl Fn(&CallContext) -> Result<u64, u32> + Send + Sync + 'static,
    ) -> Result<(), RpcError> {
        if function >= FIRST_RESERVED_FUNCTION {
            return Err(RpcError::ReservedFunction(function));
        }
        let mut h = self.shared.handlers.write().unwrap();
        if h.contains_key(&function) {
            return Err(RpcError::DuplicateHandler(function));
        }
        h.insert(function, Entry { f: Arc::new(f), opts });
        Ok(())
    }

    /// Registers under [`function_id`]`(name)` and returns the id.
    pub fn register_named(
        &self,
        name: &str,
        opts: HandlerOptions,
        f: impl Fn(&CallContext) -> Result<u64, u32> + Send + Sync + 'static,
    ) -> Result<u32, RpcError> {
        let id = function_id(name);
        self.register_with(id, opts, f)?;
        Ok(id)
    }

    /// Starts the worker threads and returns.
    pub fn start(&self) -> Result<(), RpcError> {
        if self.started.swap(true, Ordering::AcqRel) {
            return Ok(());
        }
        let mut threads = self.threads.lock().unwrap();
        for i in 0..self.shared.workers {
            let s = self.shared.clone();
            threads.push(
                std::thread::Builder::new()
                    .name(format!("rpcool-worker-{i}"))
                    .spawn(move || s.worker(i))?,
            );
        }
        if self.shared.listener.is_some() {
            let s = self.shared.clone();
            threads.push(
                std::thread::Builder::new()
                    .name("rpcool-accept".into())
                    .spawn(move || s.accept_loop())?,
            );
        }
        Ok(())
    }

    /// Serves until [`Server::shutdown`] is called from another thread.
    pub fn listen(&self) -> Result<(), RpcError> {
        self.start()?;
        while !self.shared.stop.load(Ordering::Acquire) {
            std::thread::sleep(Duration::from_millis(20));
        }
        Ok(())
    }

    /// Handle that can stop the server from another thread.
    pub fn stopper(&self) -> impl Fn() + Send + Sync + 'static {
        let s = Arc::downgrade(&self.shared);
        move || {
            if let Some(s) = s.upgrade() {
                s.stop.store(true, Ordering::Release);
            }
        }
    }

    /// Stops the workers, fails pending calls with a shutdown error, closes
    /// fallback sessions and removes the channel.
    pub fn shutdown(&self) {
        let s = &self.shared;
        s.stop.store(true, Ordering::Release);
        // SAFETY: the control block lives as long as the channel heap.
        unsafe { s.ctl.as_ref() }.closing.store(1, Ordering::Release);
        if let Some((_, a)) = &s.listener {
            let _ = TcpStream::connect_timeout(a, Duration::from_millis(200));
        }
        for t in self.threads.lock().unwrap().drain(..) {
            let _ = t.join();
        }
        let conns: Vec<_> = s.conns.lock().unwrap().drain(..).collect();
        for c in conns {
            while let Some(m) = c.ring.try_pop() {
                if let Some(r) = c.calls.get(m.call_slot) {
                    r.finish(m.sequence, ERR_SHUTDOWN, 0);
                }
            }
            if c.own_heap {
                let _ = s.rt.unmap_heap(c.heap.mapping().heap_id());
            }
        }
        while let Ok(j) = s.jobs_rx.try_recv() {
            s.answer_fallback(&j.peer, &j.msg, ERR_SHUTDOWN, 0, false);
        }
        let fb: Vec<_> = s.fb_peers.lock().unwrap().drain(..).collect();
        for p in fb {
            if let Some(sess) = p.session.get() {
                sess.close();
            }
        }
        let _ = s.rt.orchestrator().close_channel(&s.record.name);
        let _ = s.rt.unmap_heap(s.record.heaps[0].heap_id);
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if !self.shared.stop.load(Ordering::Acquire) || !self.threads.lock().unwrap().is_empty() {
            self.shutdown();
        }
    }
}

impl Shared {
    fn worker(self: Arc<Self>, index: usize) {
        crate::runtime::ensure_thread_access();
        let mut wait = BusyWait::new(self.rt.config().busy_wait, self.monitor.clone());
        let mut conns: Vec<Arc<ShmPeer>> = Vec::new();
        let mut seen_gen = u64::MAX;
        while !self.stop.load(Ordering::Acquire) {
            let gen = self.conns_gen.load(Ordering::Acquire);
            if gen != seen_gen {
                conns = self.conns.lock().unwrap().clone();
                seen_gen = gen;
            }
            let mut busy = false;
            if let Some(m) = self.accept.try_pop() {
                busy = true;
                self.handle_connect(&m);
            }
            for c in &conns {
                if let Some(m) = c.ring.try_pop() {
                    busy = true;
                    self.handle_shm(c, &m);
                }
            }
            if let Ok(j) = self.jobs_rx.try_recv() {
                busy = true;
                self.handle_fallback(&j.peer, &j.msg);
            }
            if index == 0 {
                while let Ok(n) = self.failures.try_recv() {
                    self.peer_failed(&n);
                }
            }
            if busy {
                wait.reset();
            } else {
                wait.idle();
            }
        }
    }

    fn handle_connect(&self, m: &RpcMessage) {
        if m.function != FN_CONNECT {
            log::warn!("channel {}: unexpected function {:#x} on the accept ring", self.record.name, m.function);
            return;
        }
        let heap_id = HeapId(m.scope_start);
        let chan_heap = self.record.heaps[0].heap_id;
        let (heap, own) = if heap_id == chan_heap {
            (self.heap.clone(), false)
        } else {
            match self.rt.attach_heap(heap_id).map_err(RpcError::from).and_then(|map| {
                SharedHeap::open(map).map_err(RpcError::from)
            }) {
                Ok(h) => (h, true),
                Err(e) => {
                    log::warn!("channel {}: connection heap {heap_id}: {e}", self.record.name);
                    return;
                }
            }
        };
        match self.open_connection(&heap, m.arg, own) {
            Ok(peer) => {
                self.conns.lock().unwrap().push(Arc::new(peer));
                self.conns_gen.fetch_add(1, Ordering::AcqRel);
            }
            Err(e) => {
                log::warn!("channel {}: refusing connection: {e}", self.record.name);
                if heap.mapping().contains_range(m.arg, std::mem::size_of::<ConnCtl>() as u64) && m.arg % 8 == 0 {
                    // SAFETY: in range and aligned; fields are atomics.
                    let c = unsafe { &*(m.arg as *const ConnCtl) };
                    c.accepted.store(ctl::ACCEPT_REFUSED, Ordering::Release);
                }
                if own {
                    drop(heap);
                    let _ = self.rt.unmap_heap(heap_id);
                }
            }
        }
    }

    fn open_connection(&self, heap: &SharedHeap, addr: u64, own: bool) -> Result<ShmPeer, RpcError> {
        let map = heap.mapping();
        if addr % 8 != 0 || !map.contains_range(addr, std::mem::size_of::<ConnCtl>() as u64) {
            return Err(RpcError::BadArgument);
        }
        // SAFETY: checked to lie in the heap and be aligned.
        let c = unsafe { &*(addr as *const ConnCtl) };
        if !c.is_valid() {
            return Err(RpcError::BadArgument);
        }
        let cap = c.calls_capacity as u64;
        if cap == 0 || !map.contains_range(c.calls, cap * 64) || c.calls % 64 != 0 || c.req_ring % 64 != 0 {
            return Err(RpcError::BadArgument);
        }
        if !map.contains_range(c.req_ring, super::ring::HEADER_SIZE) {
            return Err(RpcError::BadArgument);
        }
        // SAFETY: the header lies in the heap; open validates the rest.
        let ring = unsafe { MessageRing::open(c.req_ring) }?;
        if !map.contains_range(c.req_ring, MessageRing::bytes_for(ring.capacity())) {
            return Err(RpcError::BadArgument);
        }
        // SAFETY: range checked above; the heap stays mapped while the peer lives.
        let calls = unsafe { CallTable::open(c.calls, c.calls_capacity) };
        let seals = SealRing::open(map.clone(), c.seal_ring, c.seal_capacity, Role::Receiver)?;
        // SAFETY: as above.
        let chan = unsafe { self.ctl.as_ref() };
        c.conn_id.store(chan.next_conn.fetch_add(1, Ordering::AcqRel), Ordering::Relaxed);
        c.accepted.store(ctl::ACCEPT_OK, Ordering::Release);
        Ok(ShmPeer {
            heap: heap.clone(),
            ring,
            calls,
            seals,
            own_heap: own,
        })
    }

    fn remove_conn(&self, peer: &Arc<ShmPeer>) {
        let mut conns = self.conns.lock().unwrap();
        let before = conns.len();
        conns.retain(|c| !Arc::ptr_eq(c, peer));
        if conns.len() != before {
            self.conns_gen.fetch_add(1, Ordering::AcqRel);
            drop(conns);
            if peer.own_heap {
                if let Err(e) = self.rt.unmap_heap(peer.heap.mapping().heap_id()) {
                    log::debug!("unmapping connection heap: {e}");
                }
            }
        }
    }

    fn peer_failed(&self, n: &FailureNotification) {
        let dead: Vec<_> = self
            .conns
            .lock()
            .unwrap()
            .iter()
            .filter(|c| c.own_heap && c.heap.mapping().heap_id() == n.heap_id)
            .cloned()
            .collect();
        for c in dead {
            log::info!("channel {}: client {} failed, dropping its connection", self.record.name, n.failed);
            self.remove_conn(&c);
        }
    }

    fn handle_shm(&self, peer: &Arc<ShmPeer>, m: &RpcMessage) {
        if m.function == FN_DISCONNECT {
            self.remove_conn(peer);
            return;
        }
        let Some(rec) = peer.calls.get(m.call_slot) else {
            log::warn!("channel {}: call slot {} out of range", self.record.name, m.call_slot);
            return;
        };
        rec.state.store(state::IN_PROGRESS, Ordering::Release);
        let (code, ret, _) = self.dispatch(&peer.heap, &peer.seals, m, Transport::SharedMemory);
        rec.finish(m.sequence, code, ret);
    }

    fn handle_fallback(&self, peer: &Arc<FbPeer>, m: &RpcMessage) {
        let (code, ret, completed) = self.dispatch(&peer.heap, &peer.seals, m, Transport::Fallback);
        self.answer_fallback(peer, m, code, ret, completed);
    }

    fn answer_fallback(&self, peer: &FbPeer, m: &RpcMessage, code: u32, ret: u64, completed: bool) {
        let Some(sess) = peer.session.get() else { return };
        let mut frames = Vec::with_capacity(2);
        if completed {
            if let Some(img) = peer.seals.image(m.seal_index) {
                frames.push(Frame::SealInfo(img));
            }
        }
        frames.push(Frame::RpcResp {
            call_slot: m.call_slot,
            code,
            sequence: m.sequence,
            ret,
        });
        if let Err(e) = sess.send_all(&frames) {
            log::debug!("fallback response lost: {e}");
        }
    }

    /// Runs one call. Returns the completion code, the return value and
    /// whether a seal was marked complete.
    ///
    /// A seal that verifies is completed whatever the outcome, so the sender
    /// can always release it.
    fn dispatch(&self, heap: &SharedHeap, seals: &SealRing, m: &RpcMessage, transport: Transport) -> (u32, u64, bool) {
        self.served.fetch_add(1, Ordering::Relaxed);
        let token = SealToken {
            index: m.seal_index,
            epoch: m.seal_epoch,
        };
        let verified = m.is_sealed()
            && m
                .scope()
                .is_some_and(|(s, l)| heap.mapping().contains_range(s, l) && seals.is_sealed(token, s, l));
        let (code, ret) = self.run_call(heap, m, verified, transport);
        let completed = verified
            && match seals.mark_complete(token) {
                Ok(()) => true,
                Err(e) => {
                    log::warn!("completing seal {}: {e}", token.index);
                    false
                }
            };
        (code, ret, completed)
    }

    fn run_call(&self, heap: &SharedHeap, m: &RpcMessage, verified: bool, transport: Transport) -> (u32, u64) {
        let entry = match self.handlers.read().unwrap().get(&m.function) {
            Some(e) => e.clone(),
            None => return (ERR_UNKNOWN_FUNCTION, 0),
        };
        if m.arg != 0 && !heap.contains(m.arg) {
            return (ERR_BAD_ARGUMENT, 0);
        }
        let scope = m.scope();
        if let Some((s, l)) = scope {
            if !heap.mapping().contains_range(s, l) {
                return (ERR_BAD_ARGUMENT, 0);
            }
        }
        if m.is_sealed() != verified || (entry.opts.require_seal && !verified) {
            return (ERR_SEAL_VERIFY, 0);
        }
        let sandboxed = m.wants_sandbox() || entry.opts.sandbox;
        let ctx = CallContext {
            msg: *m,
            heap,
            sealed: verified,
            sandboxed,
            transport,
            reply: Cell::new(None),
        };
        let call = || match catch_unwind(AssertUnwindSafe(|| (entry.f)(&ctx))) {
            Ok(r) => r,
            Err(_) => Err(ERR_HANDLER_PANIC),
        };
        let result = if sandboxed {
            match scope {
                Some((s, l)) if m.arg == 0 || (m.arg >= s && m.arg < s + l) => run_sandboxed(s, l, call),
                _ => Err(ERR_BAD_ARGUMENT),
            }
        } else {
            call()
        };
        match ctx.reply.take().unwrap_or(result) {
            Ok(v) => (0, v),
            Err(0) => {
                log::warn!("handler for {:#x} returned error code 0", m.function);
                (ERR_HANDLER_FAULT, 0)
            }
            Err(c) => (c, 0),
        }
    }

    fn accept_loop(self: Arc<Self>) {
        let Some((listener, _)) = &self.listener else { return };
        for stream in listener.incoming() {
            if self.stop.load(Ordering::Acquire) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::debug!("fallback accept: {e}");
                    continue;
                }
            };
            let me = self.clone();
            let r = std::thread::Builder::new()
                .name("rpcool-fb-hello".into())
                .spawn(move || {
                    if let Err(e) = me.accept_fallback(stream) {
                        log::warn!("channel {}: fallback client refused: {e}", me.record.name);
                    }
                });
            if let Err(e) = r {
                log::warn!("spawning fallback handshake: {e}");
            }
        }
    }

    fn accept_fallback(self: &Arc<Self>, mut stream: TcpStream) -> Result<(), RpcError> {
        stream.set_read_timeout(Some(Duration::from_secs(10)))?;
        let (channel, holder, page_size) = server_read_hello(&mut stream)?;
        let reject = |stream: &mut TcpStream, why: String| -> RpcError {
            let _ = Frame::Hello(Hello::Reject(why.clone())).write_to(stream);
            RpcError::Transport(why)
        };
        if channel != self.record.name {
            return Err(reject(&mut stream, format!("no channel {channel:?} here")));
        }
        if !self.record.admits(holder) {
            return Err(reject(&mut stream, format!("node {} is not admitted", holder.node)));
        }
        if page_size as usize != host_page_size() {
            return Err(reject(&mut stream, format!("page size {page_size} differs from ours")));
        }
        stream.set_read_timeout(None)?;
        let size = self.record.heaps[0].size;
        let map = match self.rt.alloc_mirror_heap(size, Some(self.record.channel_id)) {
            Ok(m) => m,
            Err(e) => return Err(reject(&mut stream, e.to_string())),
        };
        let heap_id = map.heap_id();
        let built = (|| -> Result<Arc<FbPeer>, RpcError> {
            map.set_range_permission(map.base(), map.size(), perm::RW)?;
            let heap = SharedHeap::format(map.clone())?;
            let seals = SealRing::local(map.clone(), self.rt.config().seal_ring_capacity, Role::Receiver)?;
            Ok(Arc::new(FbPeer {
                heap,
                seals,
                session: OnceLock::new(),
            }))
        })();
        let peer = match built {
            Ok(p) => p,
            Err(e) => {
                drop(map);
                let _ = self.rt.unmap_heap(heap_id);
                return Err(reject(&mut stream, e.to_string()));
            }
        };
        let events = Arc::new(FbEvents {
            peer: Arc::downgrade(&peer),
            shared: Arc::downgrade(self),
        });
        let desc = map.descriptor().clone();
        let sess = match Session::establish(stream, map, Side::Server, events) {
            Ok(s) => s,
            Err(e) => {
                drop(peer);
                let _ = self.rt.unmap_heap(heap_id);
                return Err(e.into());
            }
        };
        let _ = peer.session.set(sess.clone());
        self.fb_peers.lock().unwrap().push(peer);
        sess.send(&Frame::Hello(Hello::Accept {
            heap: desc,
            page_size,
        }))?;
        Ok(())
    }

    fn drop_fallback_peer(&self, heap_id: HeapId) {
        let mut peers = self.fb_peers.lock().unwrap();
        let before = peers.len();
        peers.retain(|p| p.heap.mapping().heap_id() != heap_id);
        let removed = peers.len() != before;
        drop(peers);
        if removed {
            if let Err(e) = self.rt.unmap_heap(heap_id) {
                log::debug!("unmapping fallback heap: {e}");
            }
        }
    }
}

/// Runs `call` confined to `[start, start + len)`.
fn run_sandboxed(start: u64, len: u64, call: impl FnOnce() -> Result<u64, u32>) -> Result<u64, u32> {
    let mut sb = match Sandbox::begin(start, len, &[]) {
        Ok(sb) => sb,
        Err(e) => {
            log::warn!("sandbox setup for {start:#x}+{len:#x}: {e}");
            return Err(ERR_BAD_ARGUMENT);
        }
    };
    let r = sb.run(|_| call());
    let _ = sb.end();
    match r {
        Ok(v) => v,
        Err(e) if e.is_violation() => Err(ERR_SANDBOX_VIOLATION),
        Err(e) => {
            log::debug!("sandboxed handler: {e}");
            Err(ERR_HANDLER_FAULT)
        }
    }
}

struct FbEvents {
    peer: Weak<FbPeer>,
    shared: Weak<Shared>,
}

impl SessionEvents for FbEvents {
    fn frame(&self, session: &Session, frame: Frame) {
        let (Some(peer), Some(shared)) = (self.peer.upgrade(), self.shared.upgrade()) else {
            return;
        };
        match frame {
            Frame::RpcReq(m) if m.function == FN_DISCONNECT => session.close(),
            Frame::RpcReq(msg) => {
                let _ = shared.jobs_tx.send(Job { peer, msg });
            }
            Frame::SealInfo(img) => {
                if let Err(e) = peer.seals.apply_image(img) {
                    log::warn!("seal image from client: {e}");
                }
            }
            f => log::debug!("unexpected frame type {} from fallback client", f.kind()),
        }
    }

    fn closed(&self, session: &Session) {
        if let Some(shared) = self.shared.upgrade() {
            shared.drop_fallback_peer(session.mapping().heap_id());
        }
    }
}
