//! One server and one client mirroring a heap over a stream.
//!
//! Every page has exactly one owner. The owner maps it read-write (or
//! read-only while it holds a seal on it); the other side maps it
//! inaccessible. A thread touching a page it does not own faults; the fault
//! handler passes the page to this session's pager thread and blocks. The
//! pager sends `PAGE_REQ`; the owner revokes its own access, ships the bytes
//! in `PAGE_DATA` and forgets the page. On arrival the bytes are installed
//! through the privileged alias, access is granted and the faulting thread
//! retries its instruction.
//!
//! All frames a side sends go through one writer lock, and a page is revoked
//! before its `PAGE_DATA` is queued. So a request for a page always reaches
//! the peer after the data that made the peer its owner, and a request that
//! finds the receiver not owning the page is stale and dropped.
//!
//! A page that just arrived is kept for a short hold time before it is
//! served again, so the thread that asked for it gets to use it.

use std::collections::HashSet;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::os::fd::{FromRawFd, OwnedFd};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::frame::{write_page_data, Frame, Hello};
use super::FallbackError;
use crate::ids::HolderId;
use crate::orchestrator::HeapDescriptor;
use crate::runtime::fault::{perm, Resolver, REQ_WRITE};
use crate::runtime::{sys, Backing, HeapMapping};

/// Default time a page stays put after it arrives.
pub const DEFAULT_HOLD: Duration = Duration::from_micros(50);

const STOP: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Owns every page at the start.
    Server,
    Client,
}

/// Receives the frames the page protocol does not consume.
pub trait SessionEvents: Send + Sync {
    fn frame(&self, session: &Session, frame: Frame);
    fn closed(&self, _session: &Session) {}
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct SessionStats {
    pub pages_in: u64,
    pub pages_out: u64,
    pub requests_sent: u64,
    pub stale_requests: u64,
    pub stale_pages: u64,
}

#[derive(Default)]
struct Counters {
    pages_in: AtomicU64,
    pages_out: AtomicU64,
    requests_sent: AtomicU64,
    stale_requests: AtomicU64,
    stale_pages: AtomicU64,
}

pub struct Session {
    side: Side,
    map: Arc<HeapMapping>,
    stream: TcpStream,
    writer: Mutex<BufWriter<TcpStream>>,
    pipe_rd: OwnedFd,
    epochs: Box<[AtomicU64]>,
    /// Nanoseconds after `born` at which each page last arrived.
    arrived: Box<[AtomicU64]>,
    outstanding: Mutex<HashSet<usize>>,
    born: Instant,
    hold: Duration,
    dead: AtomicBool,
    counters: Counters,
    events: Arc<dyn SessionEvents>,
}

impl Session {
    /// Starts the protocol on a connected stream over a mirror mapping.
    ///
    /// The server side takes ownership of every page.
    pub fn establish(
        stream: TcpStream,
        map: Arc<HeapMapping>,
        side: Side,
        events: Arc<dyn SessionEvents>,
    ) -> Result<Arc<Self>, FallbackError> {
        Self::establish_with_hold(stream, map, side, events, DEFAULT_HOLD)
    }

    pub fn establish_with_hold(
        stream: TcpStream,
        map: Arc<HeapMapping>,
        side: Side,
        events: Arc<dyn SessionEvents>,
        hold: Duration,
    ) -> Result<Arc<Self>, FallbackError> {
        if map.backing() != Backing::Mirror {
            return Err(FallbackError::NotMirror(map.heap_id()));
        }
        if map.resolver().is_some() {
            return Err(FallbackError::AlreadyServed(map.heap_id()));
        }
        stream.set_nodelay(true)?;
        let mut fds = [0; 2];
        // SAFETY: fds is a valid out array.
        if unsafe { libc::pipe2(fds.as_mut_ptr(), libc::O_CLOEXEC) } != 0 {
            return Err(io::Error::last_os_error().into());
        }
        // SAFETY: pipe2 just returned these.
        let pipe_rd = unsafe { OwnedFd::from_raw_fd(fds[0]) };
        let pages = map.pages();
        if side == Side::Server {
            map.set_range_permission(map.base(), map.size(), perm::RW)?;
        }
        map.install_resolver(Resolver {
            pipe_wr: fds[1],
            gens: (0..pages).map(|_| AtomicU32::new(0)).collect(),
            dead: AtomicBool::new(false),
        })?;
        let s = Arc::new(Self {
            side,
            writer: Mutex::new(BufWriter::with_capacity(64 << 10, stream.try_clone()?)),
            stream,
            map,
            pipe_rd,
            epochs: (0..pages).map(|_| AtomicU64::new(0)).collect(),
            arrived: (0..pages).map(|_| AtomicU64::new(0)).collect(),
            outstanding: Mutex::new(HashSet::new()),
            born: Instant::now(),
            hold,
            dead: AtomicBool::new(false),
            counters: Counters::default(),
            events,
        });
        let r = s.clone();
        std::thread::Builder::new()
            .name("rpcool-fb-read".into())
            .spawn(move || r.reader())?;
        let p = s.clone();
        std::thread::Builder::new()
            .name("rpcool-fb-page".into())
            .spawn(move || p.pager())?;
        Ok(s)
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn mapping(&self) -> &Arc<HeapMapping> {
        &self.map
    }

    pub fn is_dead(&self) -> bool {
        self.dead.load(Ordering::Acquire)
    }

    pub fn stats(&self) -> SessionStats {
        let c = &self.counters;
        SessionStats {
            pages_in: c.pages_in.load(Ordering::Relaxed),
            pages_out: c.pages_out.load(Ordering::Relaxed),
            requests_sent: c.requests_sent.load(Ordering::Relaxed),
            stale_requests: c.stale_requests.load(Ordering::Relaxed),
            stale_pages: c.stale_pages.load(Ordering::Relaxed),
        }
    }

    /// True if this side currently owns `page`.
    pub fn owns(&self, page: usize) -> bool {
        self.map.perm(page) & perm::ABSENT == 0
    }

    /// Ownership of every page, for protocol audits.
    pub fn ownership(&self) -> Vec<bool> {
        (0..self.map.pages()).map(|p| self.owns(p)).collect()
    }

    pub fn page_epoch(&self, page: usize) -> u64 {
        self.epochs[page].load(Ordering::Acquire)
    }

    /// Sends a frame to the peer.
    pub fn send(&self, f: &Frame) -> Result<(), FallbackError> {
        self.send_all(std::slice::from_ref(f))
    }

    /// Sends frames back to back, with no other frame in between.
    pub fn send_all(&self, frames: &[Frame]) -> Result<(), FallbackError> {
        if self.is_dead() {
            return Err(FallbackError::Closed);
        }
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let r = frames
            .iter()
            .try_for_each(|f| f.write_to(&mut *w))
            .and_then(|_| w.flush());
        drop(w);
        r.map_err(|e| {
            self.mark_dead();
            e.into()
        })
    }

    /// Says goodbye and closes the stream. Pages this side does not own stay
    /// inaccessible.
    pub fn close(&self) {
        let _ = self.send(&Frame::Bye);
        let _ = self.stream.shutdown(Shutdown::Both);
    }

    fn now_ns(&self) -> u64 {
        self.born.elapsed().as_nanos() as u64
    }

    fn reader(self: Arc<Self>) {
        crate::runtime::ensure_thread_access();
        let mut r = match self.stream.try_clone() {
            Ok(s) => BufReader::with_capacity(64 << 10, s),
            Err(_) => return self.finish(),
        };
        loop {
            match Frame::read_from(&mut r) {
                Ok(Frame::PageReq { page, .. }) => self.serve(page as usize),
                Ok(Frame::PageData { page, epoch, bytes }) => self.install(page as usize, epoch, &bytes),
                Ok(Frame::Bye) => break,
                Ok(Frame::Hello(_)) => log::debug!("ignoring hello inside a session"),
                Ok(f) => self.events.frame(&self, f),
                Err(e) => {
                    if !self.is_dead() && e.kind() != io::ErrorKind::UnexpectedEof {
                        log::warn!("fallback session on heap {}: {e}", self.map.heap_id());
                    }
                    break;
                }
            }
        }
        self.finish();
    }

    fn finish(&self) {
        self.mark_dead();
        let _ = self.stream.shutdown(Shutdown::Both);
        self.events.closed(self);
    }

    fn mark_dead(&self) {
        if self.dead.swap(true, Ordering::AcqRel) {
            return;
        }
        if let Some(r) = self.map.resolver() {
            r.dead.store(true, Ordering::Release);
            for &p in self.outstanding.lock().unwrap_or_else(|e| e.into_inner()).iter() {
                r.gens[p].fetch_add(1, Ordering::AcqRel);
                sys::futex_wake(&r.gens[p], i32::MAX);
            }
            let b = STOP.to_le_bytes();
            // SAFETY: writing 8 bytes from a local array to our pipe.
            unsafe { libc::write(r.pipe_wr, b.as_ptr() as *const libc::c_void, 8) };
        }
    }

    /// Hands `page` to the peer if this side owns it.
    fn serve(&self, page: usize) {
        if page >= self.map.pages() {
            return;
        }
        let due = self.arrived[page].load(Ordering::Acquire) + self.hold.as_nanos() as u64;
        let now = self.now_ns();
        if now < due {
            std::thread::sleep(Duration::from_nanos(due - now));
        }
        let mut w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let bits = self.map.perm(page);
        if bits & perm::ABSENT != 0 {
            self.counters.stale_requests.fetch_add(1, Ordering::Relaxed);
            return;
        }
        let addr = self.map.page_addr(page);
        let ps = self.map.page_size();
        let gone = perm::NONE | perm::ABSENT | (bits & perm::LOCAL_SEAL);
        if let Err(e) = self.map.set_range_permission(addr, ps as u64, gone) {
            log::error!("cannot revoke page {page}: {e}");
            return;
        }
        let epoch = self.epochs[page].fetch_add(1, Ordering::AcqRel) + 1;
        // SAFETY: the alias covers the whole heap; nobody here writes the page
        // now that it is revoked.
        let bytes = unsafe { std::slice::from_raw_parts(self.map.alias_of(addr), ps) };
        let r = write_page_data(&mut *w, page as u64, epoch, bytes).and_then(|_| w.flush());
        drop(w);
        match r {
            Ok(()) => {
                self.counters.pages_out.fetch_add(1, Ordering::Relaxed);
            }
            Err(_) => self.mark_dead(),
        }
    }

    fn install(&self, page: usize, epoch: u64, bytes: &[u8]) {
        let ps = self.map.page_size();
        if page >= self.map.pages() || bytes.len() != ps {
            log::warn!("malformed page data for page {page}");
            return;
        }
        if epoch <= self.epochs[page].load(Ordering::Acquire) || self.owns(page) {
            self.counters.stale_pages.fetch_add(1, Ordering::Relaxed);
            return;
        }
        let addr = self.map.page_addr(page);
        // SAFETY: alias covers the page; the fixed view is inaccessible here
        // until the permission change below.
        unsafe { std::ptr::copy_nonoverlapping(bytes.as_ptr(), self.map.alias_of(addr), ps) };
        self.epochs[page].store(epoch, Ordering::Release);
        self.arrived[page].store(self.now_ns(), Ordering::Release);
        let sealed = self.map.perm(page) & perm::LOCAL_SEAL;
        let bits = if sealed != 0 { perm::READ | perm::LOCAL_SEAL } else { perm::RW };
        if let Err(e) = self.map.set_range_permission(addr, ps as u64, bits) {
            log::error!("cannot map arrived page {page}: {e}");
        }
        self.counters.pages_in.fetch_add(1, Ordering::Relaxed);
        self.outstanding.lock().unwrap_or_else(|e| e.into_inner()).remove(&page);
        if let Some(r) = self.map.resolver() {
            r.gens[page].fetch_add(1, Ordering::AcqRel);
            sys::futex_wake(&r.gens[page], i32::MAX);
        }
    }

    fn pager(self: Arc<Self>) {
        let mut f = std::fs::File::from(self.pipe_rd.try_clone().expect("dup pipe"));
        let r = self.map.resolver().expect("resolver installed");
        let mut buf = [0u8; 8];
        loop {
            if f.read_exact(&mut buf).is_err() {
                break;
            }
            let req = u64::from_le_bytes(buf);
            if req == STOP || self.is_dead() {
                break;
            }
            let page = (req & !REQ_WRITE) as usize;
            let write = req & REQ_WRITE != 0;
            if page >= self.map.pages() {
                continue;
            }
            let bits = self.map.perm(page);
            if bits & perm::ABSENT == 0 || perm::allows(bits, write) {
                r.gens[page].fetch_add(1, Ordering::AcqRel);
                sys::futex_wake(&r.gens[page], i32::MAX);
                continue;
            }
            if !self.outstanding.lock().unwrap_or_else(|e| e.into_inner()).insert(page) {
                continue;
            }
            if self.send(&Frame::PageReq { page: page as u64, write }).is_ok() {
                self.counters.requests_sent.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
}

/// Client half of the handshake: asks for `channel` and returns the heap
/// descriptor the server mirrors.
pub fn client_hello(
    stream: &mut TcpStream,
    channel: &str,
    holder: HolderId,
    page_size: u32,
) -> Result<HeapDescriptor, FallbackError> {
    Frame::Hello(Hello::Request {
        channel: channel.to_string(),
        holder,
        page_size,
    })
    .write_to(stream)?;
    match Frame::read_from(stream)? {
        Frame::Hello(Hello::Accept { heap, page_size: ps }) => {
            if ps != page_size {
                return Err(FallbackError::Mismatch(format!(
                    "server pages are {ps} bytes, ours are {page_size}"
                )));
            }
            Ok(heap)
        }
        Frame::Hello(Hello::Reject(msg)) => Err(FallbackError::Rejected(msg)),
        f => Err(FallbackError::Protocol(format!("expected hello, got frame type {}", f.kind()))),
    }
}

/// Server half: reads the client's request.
pub fn server_read_hello(stream: &mut TcpStream) -> Result<(String, HolderId, u32), FallbackError> {
    match Frame::read_from(stream)? {
        Frame::Hello(Hello::Request {
            channel,
            holder,
            page_size,
        }) => Ok((channel, holder, page_size)),
        f => Err(FallbackError::Protocol(format!("expected hello, got frame type {}", f.kind()))),
    }
}
