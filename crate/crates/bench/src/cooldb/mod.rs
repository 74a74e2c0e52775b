//! CoolDB: a document store whose clients hand over documents by reference.
//!
//! `put` passes a tree the client built in the channel heap; the store keeps
//! the pointer and owns the tree from then on. `get` returns a pointer to the
//! stored tree. `search` scans for documents whose number at a field path
//! lies in a closed range and returns references to their keys.
//!
//! `put_secure` takes a tree built in a sealed scope. The server checks it
//! inside a sandbox confined to the scope, then copies it into memory the
//! client cannot change.

pub mod doc;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rpcool::heap::{Scope, SharedHeap, ShmAlloc, ShmPtr, ShmVec};
use rpcool::orchestrator::HeapMode;
use rpcool::rpc::{CallContext, CallOptions, ChannelConfig, ConnectOptions, Connection, HandlerOptions, RpcError, Server};
use rpcool::runtime::NodeRuntime;
use rpcool::sandbox;
use serde_json::Value;

use doc::{KeyRef, Path};

pub const PUT: u32 = 10;
pub const GET: u32 = 11;
pub const SEARCH: u32 = 12;
pub const LEN: u32 = 13;
pub const PUT_SECURE: u32 = 14;

pub const ERR_MISSING: u32 = 1;
pub const ERR_PREDICATE: u32 = 2;
pub const ERR_INVALID_DOC: u32 = 3;
pub const ERR_BAD_KEY: u32 = 4;
pub const ERR_NO_SPACE: u32 = 5;

/// Largest document `put_secure` accepts, in nodes.
pub const MAX_NODES: u64 = 1 << 16;

pub const DEFAULT_HEAP: u64 = 128 << 20;

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PutReq {
    pub key: KeyRef,
    pub doc: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SearchReq {
    pub path: KeyRef,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum CoolDbError {
    #[error("no document under key {0:?}")]
    Missing(String),
    #[error("malformed predicate: {0}")]
    Predicate(String),
    #[error("document rejected")]
    InvalidDocument,
    #[error("store is out of space")]
    NoSpace,
    #[error(transparent)]
    Rpc(#[from] RpcError),
    #[error(transparent)]
    Heap(#[from] rpcool::heap::HeapError),
}

struct Entry {
    doc: u64,
    key: KeyRef,
}

#[derive(Default)]
struct Store {
    docs: BTreeMap<String, Entry>,
}

fn read<T: Copy>(addr: u64) -> T {
    // SAFETY: the server checked `addr` is inside the connection heap.
    unsafe { std::ptr::read_volatile(addr as *const T) }
}

fn key_string(k: KeyRef) -> Result<String, u32> {
    if k.len > 4096 {
        return Err(ERR_BAD_KEY);
    }
    // SAFETY: references into the connection heap.
    let b = unsafe { doc::bytes(k.ptr, k.len) };
    String::from_utf8(b.to_vec()).map_err(|_| ERR_BAD_KEY)
}

fn keep_key(heap: &SharedHeap, k: &str) -> Result<KeyRef, u32> {
    let ptr = heap.alloc(k.len().max(1) as u64, 1).map_err(|_| ERR_NO_SPACE)?;
    // SAFETY: fresh allocation.
    unsafe { std::ptr::copy_nonoverlapping(k.as_ptr(), ptr as *mut u8, k.len()) };
    Ok(KeyRef { ptr, len: k.len() as u64 })
}

impl Store {
    fn insert(&mut self, heap: &SharedHeap, name: String, doc: u64) -> Result<(), u32> {
        match self.docs.get_mut(&name) {
            Some(e) => {
                let old = std::mem::replace(&mut e.doc, doc);
                let _ = doc::free(heap, old);
            }
            None => {
                let key = keep_key(heap, &name)?;
                self.docs.insert(name, Entry { doc, key });
            }
        }
        Ok(())
    }
}

fn predicate(r: SearchReq) -> Result<Path, u32> {
    let path = key_string(r.path).map_err(|_| ERR_PREDICATE)?;
    let path: Path = path.parse().map_err(|_| ERR_PREDICATE)?;
    if !(r.lo.is_finite() && r.hi.is_finite() && r.lo <= r.hi) {
        return Err(ERR_PREDICATE);
    }
    Ok(path)
}

fn search(store: &Store, heap: &SharedHeap, r: SearchReq) -> Result<u64, u32> {
    let path = predicate(r)?;
    let hits: Vec<KeyRef> = store
        .docs
        .values()
        .filter(|e| path.number_at(e.doc).is_some_and(|x| r.lo <= x && x <= r.hi))
        .map(|e| e.key)
        .collect();
    let v = ShmVec::from_slice_in(heap, &hits).map_err(|_| ERR_NO_SPACE)?;
    Ok(v.as_ptr().addr())
}

/// Checks a sealed request inside a sandbox over its scope, then copies the
/// document out of the scope.
fn put_secure(store: &Mutex<Store>, ctx: &CallContext) -> Result<u64, u32> {
    let (start, len) = ctx.scope_range().ok_or(ERR_INVALID_DOC)?;
    let arg = ctx.arg();
    let checked = sandbox::run(start, len, &[], |_| {
        let r: PutReq = read(arg);
        let key_ok = r.key.len <= 4096 && std::str::from_utf8(unsafe { doc::bytes(r.key.ptr, r.key.len) }).is_ok();
        (key_ok, doc::validate(r.doc, MAX_NODES).is_some())
    });
    match checked {
        Ok((true, true)) => {}
        _ => return Err(ERR_INVALID_DOC),
    }
    let r: PutReq = read(arg);
    let name = key_string(r.key)?;
    let copy = doc::deep_copy(ctx.heap(), r.doc).map_err(|_| ERR_NO_SPACE)?;
    store.lock().unwrap().insert(ctx.heap(), name, copy)?;
    Ok(0)
}

/// Creates the store's channel and starts serving it.
pub fn serve(rt: &NodeRuntime, channel: &str, heap_size: u64) -> anyhow::Result<Server> {
    let cfg = ChannelConfig {
        heap_mode: HeapMode::ChannelWide,
        heap_size,
        ..Default::default()
    };
    let srv = Server::create(rt, channel, cfg)?;
    let store = Arc::new(Mutex::new(Store::default()));

    let s = store.clone();
    srv.register(PUT, move |ctx| {
        let r: PutReq = read(ctx.arg());
        if !ctx.heap().contains(r.doc) {
            return Err(ERR_INVALID_DOC);
        }
        let name = key_string(r.key)?;
        s.lock().unwrap().insert(ctx.heap(), name, r.doc)?;
        Ok(0)
    })?;
    let s = store.clone();
    srv.register(GET, move |ctx| {
        let name = key_string(read(ctx.arg()))?;
        s.lock().unwrap().docs.get(&name).map(|e| e.doc).ok_or(ERR_MISSING)
    })?;
    let s = store.clone();
    srv.register(SEARCH, move |ctx| search(&s.lock().unwrap(), ctx.heap(), read(ctx.arg())))?;
    let s = store.clone();
    srv.register(LEN, move |_| Ok(s.lock().unwrap().docs.len() as u64))?;
    let s = store;
    srv.register_with(
        PUT_SECURE,
        HandlerOptions {
            require_seal: true,
            sandbox: false,
        },
        move |ctx| put_secure(&s, ctx),
    )?;
    srv.start()?;
    Ok(srv)
}

/// Peer role `cooldb <channel>`.
pub fn peer(args: &[String]) -> anyhow::Result<()> {
    let channel = args.first().map_or("/cooldb", |s| s.as_str());
    let rt = crate::harness::peer_runtime(8, true)?;
    let srv = serve(&rt, channel, DEFAULT_HEAP)?;
    crate::harness::serve_stdin("cooldb", |line| anyhow::bail!("unknown command {line:?}"))?;
    srv.shutdown();
    Ok(())
}

/// A stored document, by reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DocRef(pub u64);

impl DocRef {
    pub fn to_value(self) -> Value {
        doc::decode(self.0)
    }
}

pub struct CoolDb {
    conn: Connection,
}

fn map_err(e: RpcError, key: &str, what: &str) -> CoolDbError {
    match e {
        RpcError::Remote(ERR_MISSING) => CoolDbError::Missing(key.to_string()),
        RpcError::Remote(ERR_PREDICATE) => CoolDbError::Predicate(what.to_string()),
        RpcError::Remote(ERR_INVALID_DOC) | RpcError::Remote(ERR_BAD_KEY) => CoolDbError::InvalidDocument,
        RpcError::Remote(ERR_NO_SPACE) => CoolDbError::NoSpace,
        e => CoolDbError::Rpc(e),
    }
}

impl CoolDb {
    pub fn connect(rt: &NodeRuntime, channel: &str) -> Result<Self, CoolDbError> {
        let opts = ConnectOptions {
            call_timeout: Some(Duration::from_secs(60)),
            ..Default::default()
        };
        Self::connect_with(rt, channel, opts)
    }

    pub fn connect_with(rt: &NodeRuntime, channel: &str, opts: ConnectOptions) -> Result<Self, CoolDbError> {
        Ok(Self {
            conn: Connection::connect_with(rt, channel, opts)?,
        })
    }

    pub fn connection(&self) -> &Connection {
        &self.conn
    }

    fn key_ref(&self, a: &impl ShmAlloc, k: &str) -> Result<KeyRef, CoolDbError> {
        let ptr = a.alloc_bytes(k.len().max(1) as u64, 1)?;
        // SAFETY: fresh allocation.
        unsafe { std::ptr::copy_nonoverlapping(k.as_ptr(), ptr as *mut u8, k.len()) };
        Ok(KeyRef { ptr, len: k.len() as u64 })
    }

    /// Stores `v` under `key`. The tree is built in the channel heap and
    /// handed to the store, which owns it from then on.
    pub fn put(&self, key: &str, v: &Value) -> Result<(), CoolDbError> {
        let heap = self.conn.heap();
        let root = doc::encode(heap, v)?;
        self.put_ref(key, root)
    }

    /// Hands an already built tree to the store.
    pub fn put_ref(&self, key: &str, root: u64) -> Result<(), CoolDbError> {
        let heap = self.conn.heap();
        let k = self.key_ref(heap, key)?;
        let req = heap.alloc_value(PutReq { key: k, doc: root })?;
        let r = self.conn.call(PUT, req.addr());
        heap.free(req.addr())?;
        heap.free(k.ptr)?;
        r.map(|_| ()).map_err(|e| map_err(e, key, ""))
    }

    /// Builds `v` in `scope`, seals it and has the server check and copy it.
    /// The scope is reset first and can be reused afterwards.
    pub fn put_secure(&self, key: &str, v: &Value, scope: &Scope) -> Result<(), CoolDbError> {
        scope.reset()?;
        let root = doc::encode(scope, v)?;
        let k = self.key_ref(scope, key)?;
        let req = scope.alloc_value(PutReq { key: k, doc: root })?;
        let opts = CallOptions {
            seal: true,
            sandbox: false,
        };
        self.conn
            .call_scoped(PUT_SECURE, req.addr(), scope, opts)
            .map(|_| ())
            .map_err(|e| map_err(e, key, ""))
    }

    /// Reference to the stored document.
    pub fn get(&self, key: &str) -> Result<DocRef, CoolDbError> {
        let heap = self.conn.heap();
        let k = self.key_ref(heap, key)?;
        let req = heap.alloc_value(k)?;
        let r = self.conn.call(GET, req.addr());
        heap.free(req.addr())?;
        heap.free(k.ptr)?;
        r.map(DocRef).map_err(|e| map_err(e, key, ""))
    }

    /// Keys of documents whose number at `path` is in `[lo, hi]`, in key
    /// order.
    pub fn search(&self, path: &str, lo: f64, hi: f64) -> Result<Vec<String>, CoolDbError> {
        let heap = self.conn.heap();
        let p = self.key_ref(heap, path)?;
        let req = heap.alloc_value(SearchReq { path: p, lo, hi })?;
        let r = self.conn.call(SEARCH, req.addr());
        heap.free(req.addr())?;
        heap.free(p.ptr)?;
        let what = format!("{path} in [{lo}, {hi}]");
        let v: ShmVec<KeyRef> = ShmVec::from_ptr(ShmPtr::from_addr(r.map_err(|e| map_err(e, "", &what))?));
        let keys = v
            .to_vec()
            .into_iter()
            // SAFETY: keys the store keeps in the channel heap.
            .map(|k| String::from_utf8_lossy(unsafe { doc::bytes(k.ptr, k.len) }).into_owned())
            .collect();
        v.free(heap)?;
        Ok(keys)
    }

    pub fn len(&self) -> Result<u64, CoolDbError> {
        Ok(self.conn.call(LEN, 0)?)
    }

    pub fn is_empty(&self) -> Result<bool, CoolDbError> {
        Ok(self.len()? == 0)
    }
}

/// Flat-scan reference for `search` over in-memory documents.
pub fn flat_scan<'a>(docs: impl IntoIterator<Item = (&'a String, &'a Value)>, path: &str, lo: f64, hi: f64) -> Vec<String> {
    let Ok(p) = path.parse::<Path>() else {
        return Vec::new();
    };
    let mut v: Vec<String> = docs
        .into_iter()
        .filter(|(_, d)| p.number_in(d).is_some_and(|x| lo <= x && x <= hi))
        .map(|(k, _)| k.clone())
        .collect();
    v.sort();
    v
}
