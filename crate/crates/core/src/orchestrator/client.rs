//! Remote orchestrator handle.

use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crossbeam::channel::{bounded, unbounded, Receiver, Sender};

use super::wire::{self, Request, Response};
use super::{
    ChannelOptions, ChannelRecord, FailureNotification, HeapDescriptor, LeaseGrant, OrchError,
    Orchestration, QuotaDecision,
};
use crate::ids::{ChannelId, HeapId, HolderId, LeaseId};

type Reply = Result<Response, OrchError>;

/// One TCP session with the orchestrator, multiplexing concurrent requests.
pub struct OrchestratorClient {
    holder: HolderId,
    stream: Mutex<TcpStream>,
    waiting: Arc<Mutex<HashMap<u64, Sender<Reply>>>>,
    dead: Arc<AtomicBool>,
    next_corr: AtomicU64,
    notes: Receiver<FailureNotification>,
    timeout: Duration,
}

impl OrchestratorClient {
    pub fn connect(addr: impl ToSocketAddrs, holder: HolderId) -> Result<Self, OrchError> {
        let stream =
            TcpStream::connect(addr).map_err(|e| OrchError::Unreachable(e.to_string()))?;
        let _ = stream.set_nodelay(true);
        let reader = stream
            .try_clone()
            .map_err(|e| OrchError::Unreachable(e.to_string()))?;
        let waiting: Arc<Mutex<HashMap<u64, Sender<Reply>>>> = Arc::default();
        let dead = Arc::new(AtomicBool::new(false));
        let (ntx, nrx) = unbounded();
        {
            let waiting = waiting.clone();
            let dead = dead.clone();
            std::thread::Builder::new()
                .name("rpcool-orch-client".into())
                .spawn(move || demux(reader, waiting, dead, ntx))
                .map_err(|e| OrchError::Unreachable(e.to_string()))?;
        }
        let client = Self {
            holder,
            stream: Mutex::new(stream),
            waiting,
            dead,
            next_corr: AtomicU64::new(1),
            notes: nrx,
            timeout: Duration::from_secs(10),
        };
        // Announces the holder so failure notifications can reach it early.
        client.check_quota(0)?;
        Ok(client)
    }

    fn call(&self, req: Request) -> Reply {
        if self.dead.load(Ordering::SeqCst) {
            return Err(OrchError::Unreachable("connection closed".into()));
        }
        let corr = self.next_corr.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = bounded(1);
        self.waiting.lock().unwrap().insert(corr, tx);
        let payload = wire::encode_request(corr, self.holder, &req);
        let sent = {
            let mut s = self.stream.lock().unwrap_or_else(|e| e.into_inner());
            wire::write_frame(&mut *s, req.kind(), &payload).and_then(|_| s.flush())
        };
        if let Err(e) = sent {
            self.waiting.lock().unwrap().remove(&corr);
            return Err(OrchError::Unreachable(e.to_string()));
        }
        match rx.recv_timeout(self.timeout) {
            Ok(r) => r,
            Err(_) => {
                self.waiting.lock().unwrap().remove(&corr);
                Err(OrchError::Unreachable("no reply from orchestrator".into()))
            }
        }
    }
}

fn unexpected(r: Response) -> OrchError {
    OrchError::Protocol(format!("unexpected reply {r:?}"))
}

fn demux(
    stream: TcpStream,
    waiting: Arc<Mutex<HashMap<u64, Sender<Reply>>>>,
    dead: Arc<AtomicBool>,
    notes: Sender<FailureNotification>,
) {
    let mut reader = BufReader::new(stream);
    while let Ok(Some((kind, payload))) = wire::read_frame(&mut reader) {
        if kind == wire::NOTIFY {
            if let Ok(n) = wire::decode_notify(&payload) {
                let _ = notes.send(n);
            }
            continue;
        }
        match wire::decode_response(&payload) {
            Ok((corr, reply)) => {
                if let Some(tx) = waiting.lock().unwrap().remove(&corr) {
                    let _ = tx.send(reply);
                }
            }
            Err(e) => {
                log::warn!("bad orchestrator reply: {e}");
                break;
            }
        }
    }
    dead.store(true, Ordering::SeqCst);
    for (_, tx) in waiting.lock().unwrap().drain() {
        let _ = tx.send(Err(OrchError::Unreachable("connection closed".into())));
    }
}

impl Drop for OrchestratorClient {
    fn drop(&mut self) {
        if let Ok(s) = self.stream.lock() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
    }
}

impl Orchestration for OrchestratorClient {
    fn holder(&self) -> HolderId {
        self.holder
    }

    fn register_channel(
        &self,
        name: &str,
        opts: ChannelOptions,
    ) -> Result<(ChannelRecord, LeaseGrant), OrchError> {
        match self.call(Request::RegisterChannel {
            name: name.to_string(),
            opts,
        })? {
            Response::ChannelLeased(c, g) => Ok((c, g)),
            r => Err(unexpected(r)),
        }
    }

    fn lookup_channel(&self, name: &str) -> Result<ChannelRecord, OrchError> {
        match self.call(Request::LookupChannel {
            name: name.to_string(),
        })? {
            Response::Channel(c) => Ok(c),
            r => Err(unexpected(r)),
        }
    }

    fn alloc_heap(
        &self,
        size: u64,
        channel: Option<ChannelId>,
    ) -> Result<(HeapDescriptor, LeaseGrant), OrchError> {
        match self.call(Request::AllocHeap {
            heap_id: 0,
            size,
            channel: channel.map_or(0, |c| c.0),
        })? {
            Response::Heap(h, g) => Ok((h, g)),
            r => Err(unexpected(r)),
        }
    }

    fn attach_heap(&self, heap: HeapId) -> Result<(HeapDescriptor, LeaseGrant), OrchError> {
        match self.call(Request::AllocHeap {
            heap_id: heap.0,
            size: 0,
            channel: 0,
        })? {
            Response::Heap(h, g) => Ok((h, g)),
            r => Err(unexpected(r)),
        }
    }

    fn release_heap(&self, heap: HeapId) -> Result<bool, OrchError> {
        match self.call(Request::ReleaseHeap { heap_id: heap })? {
            Response::Released(r) => Ok(r),
            r => Err(unexpected(r)),
        }
    }

    fn renew_lease(&self, lease: LeaseId) -> Result<Duration, OrchError> {
        match self.call(Request::RenewLease { lease_id: lease })? {
            Response::Renewed(d) => Ok(d),
            r => Err(unexpected(r)),
        }
    }

    fn check_quota(&self, additional: u64) -> Result<QuotaDecision, OrchError> {
        match self.call(Request::QuotaQuery { additional })? {
            Response::Quota(q) => Ok(q),
            r => Err(unexpected(r)),
        }
    }

    fn close_channel(&self, name: &str) -> Result<(), OrchError> {
        match self.call(Request::CloseChannel {
            name: name.to_string(),
        })? {
            Response::Done => Ok(()),
            r => Err(unexpected(r)),
        }
    }

    fn notifications(&self) -> Receiver<FailureNotification> {
        self.notes.clone()
    }
}
