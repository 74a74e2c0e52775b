//! TCP front end for the orchestrator.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use super::wire::{self, Request, Response};
use super::{Clock, LeaseGrant, OrchError, Orchestrator, SharedOrchestrator, SystemClock};
use crate::config::OrchestratorConfig;
use crate::ids::{ChannelId, HeapId, HolderId};

/// Executes one request against the shared state on behalf of `holder`.
pub fn dispatch<C: Clock>(
    shared: &SharedOrchestrator<C>,
    holder: HolderId,
    req: Request,
) -> Result<Response, OrchError> {
    let mut s = shared.lock();
    match req {
        Request::RegisterChannel { name, opts } => {
            let (rec, lease) = s.register_channel(&name, opts, holder)?;
            Ok(Response::ChannelLeased(rec, LeaseGrant::from(&lease)))
        }
        Request::LookupChannel { name } => s.lookup_channel(&name, holder).map(Response::Channel),
        Request::AllocHeap {
            heap_id: 0,
            size,
            channel,
        } => {
            let (desc, lease) = s.allocate_heap(size, holder)?;
            if channel != 0 {
                if let Err(e) = s.link_heap(ChannelId(channel), desc.heap_id) {
                    s.release_heap(desc.heap_id, holder)?;
                    return Err(e);
                }
            }
            Ok(Response::Heap(desc, LeaseGrant::from(&lease)))
        }
        Request::AllocHeap { heap_id, .. } => {
            let (desc, lease) = s.attach_heap(HeapId(heap_id), holder)?;
            Ok(Response::Heap(desc, LeaseGrant::from(&lease)))
        }
        Request::ReleaseHeap { heap_id } => {
            s.release_heap(heap_id, holder).map(Response::Released)
        }
        Request::RenewLease { lease_id } => {
            let expiry = s.renew_lease(lease_id)?;
            Ok(Response::Renewed(expiry.saturating_sub(s.now())))
        }
        Request::QuotaQuery { additional } => Ok(Response::Quota(s.check_quota(holder, additional))),
        Request::CloseChannel { name } => {
            s.close_channel(&name, holder)?;
            Ok(Response::Done)
        }
    }
}

/// A running orchestrator service: accept loop, sessions and lease sweeper.
pub struct OrchestratorServer<C: Clock + 'static = SystemClock> {
    shared: Arc<SharedOrchestrator<C>>,
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl OrchestratorServer<SystemClock> {
    pub fn bind(addr: impl ToSocketAddrs, cfg: OrchestratorConfig) -> io::Result<Self> {
        Self::bind_with(addr, Orchestrator::new(cfg))
    }
}

impl<C: Clock + 'static> OrchestratorServer<C> {
    pub fn bind_with(addr: impl ToSocketAddrs, orch: Orchestrator<C>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let sweep_period = (orch.config().lease_term() / 4).max(Duration::from_millis(5));
        let shared = SharedOrchestrator::new(orch);
        shared.spawn_sweeper(sweep_period);
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let shared = shared.clone();
            let stop = stop.clone();
            std::thread::Builder::new()
                .name("rpcool-orch-accept".into())
                .spawn(move || accept_loop(listener, shared, stop))?
        };
        log::info!("orchestrator listening on {addr}");
        Ok(Self {
            shared,
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shared(&self) -> &Arc<SharedOrchestrator<C>> {
        &self.shared
    }

    /// Blocks until the accept loop ends (it only ends on [`Self::shutdown`]).
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl<C: Clock + 'static> Drop for OrchestratorServer<C> {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop<C: Clock + 'static>(
    listener: TcpListener,
    shared: Arc<SharedOrchestrator<C>>,
    stop: Arc<AtomicBool>,
) {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = conn else { continue };
        let _ = stream.set_nodelay(true);
        let shared = shared.clone();
        let stop = stop.clone();
        let _ = std::thread::Builder::new()
            .name("rpcool-orch-session".into())
            .spawn(move || {
                if let Err(e) = session(stream, shared, stop) {
                    log::debug!("orchestrator session ended: {e}");
                }
            });
    }
}

fn session<C: Clock + 'static>(
    stream: TcpStream,
    shared: Arc<SharedOrchestrator<C>>,
    stop: Arc<AtomicBool>,
) -> io::Result<()> {
    let writer = Arc::new(Mutex::new(BufWriter::new(stream.try_clone()?)));
    let mut reader = BufReader::new(stream.try_clone()?);
    let closed = Arc::new(AtomicBool::new(false));
    let mut subscribed: Vec<HolderId> = Vec::new();
    let result = (|| -> io::Result<()> {
        while let Some((kind, payload)) = wire::read_frame(&mut reader)? {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let (corr, holder, res) = match wire::decode_request(kind, &payload) {
                Ok((corr, holder, req)) => (corr, Some(holder), dispatch(&shared, holder, req)),
                Err(e) => (read_corr(&payload), None, Err(e)),
            };
            if let Some(h) = holder.filter(|h| !subscribed.contains(h)) {
                subscribed.push(h);
                spawn_forwarder(&shared, h, writer.clone(), closed.clone());
            }
            let bytes = wire::encode_response(corr, &res);
            let mut w = writer.lock().unwrap_or_else(|e| e.into_inner());
            wire::write_frame(&mut *w, kind | wire::REPLY, &bytes)?;
            w.flush()?;
        }
        Ok(())
    })();
    closed.store(true, Ordering::SeqCst);
    let _ = stream.shutdown(std::net::Shutdown::Both);
    result
}

fn read_corr(payload: &[u8]) -> u64 {
    payload
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .unwrap_or(0)
}

fn spawn_forwarder<C: Clock + 'static>(
    shared: &Arc<SharedOrchestrator<C>>,
    holder: HolderId,
    writer: Arc<Mutex<BufWriter<TcpStream>>>,
    closed: Arc<AtomicBool>,
) {
    let rx = shared.subscribe(holder);
    let _ = std::thread::Builder::new()
        .name("rpcool-orch-notify".into())
        .spawn(move || loop {
            match rx.recv_timeout(Duration::from_millis(100)) {
                Ok(n) => {
                    let bytes = wire::encode_notify(&n);
                    let mut w = writer.lock().unwrap_or_else(|e| e.into_inner());
                    if wire::write_frame(&mut *w, wire::NOTIFY, &bytes)
                        .and_then(|_| w.flush())
                        .is_err()
                    {
                        break;
                    }
                }
                Err(crossbeam::channel::RecvTimeoutError::Timeout) => {
                    if closed.load(Ordering::SeqCst) {
                        break;
                    }
                }
                Err(_) => break,
            }
        });
}
