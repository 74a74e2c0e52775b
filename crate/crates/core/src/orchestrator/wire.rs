//! Orchestrator protocol framing.
//!
//! Frame: `u32` little-endian payload length, `u16` message type, payload.
//! Requests start with a `u64` correlation id and the caller's holder id.
//! Replies use the request type with bit 15 set and carry the correlation id
//! and a `u16` status (0 on success) followed by result fields or an error.

use std::io::{self, Read, Write};
use std::time::Duration;

use super::{
    ChannelOptions, ChannelRecord, FailureNotification, HeapDescriptor, HeapMode, LeaseGrant,
    OrchError, QuotaDecision,
};
use crate::ids::{ChannelId, HeapId, HolderId, LeaseId};

pub const REGISTER_CHANNEL: u16 = 1;
pub const LOOKUP_CHANNEL: u16 = 2;
pub const ALLOC_HEAP: u16 = 3;
pub const RELEASE_HEAP: u16 = 4;
pub const RENEW_LEASE: u16 = 5;
pub const NOTIFY: u16 = 6;
pub const QUOTA_QUERY: u16 = 7;
pub const CLOSE_CHANNEL: u16 = 8;
pub const REPLY: u16 = 0x8000;

const MAX_FRAME: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    RegisterChannel { name: String, opts: ChannelOptions },
    LookupChannel { name: String },
    /// `heap_id` 0 allocates a fresh heap; otherwise attaches to it.
    AllocHeap { heap_id: u64, size: u64, channel: u64 },
    ReleaseHeap { heap_id: HeapId },
    RenewLease { lease_id: LeaseId },
    QuotaQuery { additional: u64 },
    CloseChannel { name: String },
}

impl Request {
    pub fn kind(&self) -> u16 {
        match self {
            Request::RegisterChannel { .. } => REGISTER_CHANNEL,
            Request::LookupChannel { .. } => LOOKUP_CHANNEL,
            Request::AllocHeap { .. } => ALLOC_HEAP,
            Request::ReleaseHeap { .. } => RELEASE_HEAP,
            Request::RenewLease { .. } => RENEW_LEASE,
            Request::QuotaQuery { .. } => QUOTA_QUERY,
            Request::CloseChannel { .. } => CLOSE_CHANNEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Channel(ChannelRecord),
    ChannelLeased(ChannelRecord, LeaseGrant),
    Heap(HeapDescriptor, LeaseGrant),
    Renewed(Duration),
    Quota(QuotaDecision),
    Released(bool),
    Done,
}

#[derive(Default)]
pub struct Enc(pub Vec<u8>);

impl Enc {
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }
    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn str(&mut self, s: &str) -> &mut Self {
        let b = s.as_bytes();
        let n = b.len().min(u16::MAX as usize);
        self.u16(n as u16);
        self.0.extend_from_slice(&b[..n]);
        self
    }
    pub fn holder(&mut self, h: HolderId) -> &mut Self {
        self.u32(h.node).u32(h.pid).u32(h.incarnation)
    }
}

pub struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn short() -> OrchError {
    OrchError::Protocol("truncated message".into())
}

impl<'a> Dec<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], OrchError> {
        let end = self.pos.checked_add(n).ok_or_else(short)?;
        let s = self.buf.get(self.pos..end).ok_or_else(short)?;
        self.pos = end;
        Ok(s)
    }
    pub fn u8(&mut self) -> Result<u8, OrchError> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16, OrchError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32, OrchError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64, OrchError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn str(&mut self) -> Result<String, OrchError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| OrchError::Protocol("invalid utf-8".into()))
    }
    pub fn holder(&mut self) -> Result<HolderId, OrchError> {
        Ok(HolderId::new(self.u32()?, self.u32()?, self.u32()?))
    }
    pub fn finish(&self) -> Result<(), OrchError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(OrchError::Protocol("trailing bytes".into()))
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, kind: u16, payload: &[u8]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(6 + payload.len());
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(&kind.to_le_bytes());
    buf.extend_from_slice(payload);
    w.write_all(&buf)
}

/// Reads one frame; `Ok(None)` on clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<(u16, Vec<u8>)>> {
    let mut hdr = [0u8; 6];
    match r.read_exact(&mut hdr[..1]) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    r.read_exact(&mut hdr[1..])?;
    let len = u32::from_le_bytes(hdr[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let kind = u16::from_le_bytes(hdr[4..].try_into().unwrap());
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some((kind, payload)))
}

fn enc_heap(e: &mut Enc, h: &HeapDescriptor) {
    e.u64(h.heap_id.0).u64(h.base).u64(h.size).str(&h.backing);
}

fn dec_heap(d: &mut Dec) -> Result<HeapDescriptor, OrchError> {
    Ok(HeapDescriptor {
        heap_id: HeapId(d.u64()?),
        base: d.u64()?,
        size: d.u64()?,
        backing: d.str()?,
    })
}

fn enc_mode(m: HeapMode) -> u8 {
    match m {
        HeapMode::PerConnection => 0,
        HeapMode::ChannelWide => 1,
    }
}

fn dec_mode(v: u8) -> Result<HeapMode, OrchError> {
    match v {
        0 => Ok(HeapMode::PerConnection),
        1 => Ok(HeapMode::ChannelWide),
        _ => Err(OrchError::Protocol(format!("bad heap mode {v}"))),
    }
}

fn enc_nodes(e: &mut Enc, nodes: &[u32]) {
    e.u16(nodes.len() as u16);
    for n in nodes {
        e.u32(*n);
    }
}

fn dec_nodes(d: &mut Dec) -> Result<Vec<u32>, OrchError> {
    let n = d.u16()?;
    (0..n).map(|_| d.u32()).collect()
}

fn enc_channel(e: &mut Enc, c: &ChannelRecord) {
    e.u64(c.channel_id.0)
        .str(&c.name)
        .u8(enc_mode(c.heap_mode))
        .holder(c.server)
        .str(&c.pool)
        .str(c.fallback_endpoint.as_deref().unwrap_or(""));
    enc_nodes(e, &c.allow_nodes);
    e.u16(c.heaps.len() as u16);
    for h in &c.heaps {
        enc_heap(e, h);
    }
}

fn dec_channel(d: &mut Dec) -> Result<ChannelRecord, OrchError> {
    let channel_id = ChannelId(d.u64()?);
    let name = d.str()?;
    let heap_mode = dec_mode(d.u8()?)?;
    let server = d.holder()?;
    let pool = d.str()?;
    let fb = d.str()?;
    let allow_nodes = dec_nodes(d)?;
    let n = d.u16()?;
    let heaps = (0..n).map(|_| dec_heap(d)).collect::<Result<_, _>>()?;
    Ok(ChannelRecord {
        channel_id,
        name,
        heap_mode,
        server,
        pool,
        fallback_endpoint: (!fb.is_empty()).then_some(fb),
        allow_nodes,
        heaps,
    })
}

fn enc_grant(e: &mut Enc, g: &LeaseGrant) {
    e.u64(g.lease_id.0)
        .u64(g.heap_id.0)
        .u64(g.remaining.as_millis() as u64)
        .u64(g.term.as_millis() as u64);
}

fn dec_grant(d: &mut Dec) -> Result<LeaseGrant, OrchError> {
    Ok(LeaseGrant {
        lease_id: LeaseId(d.u64()?),
        heap_id: HeapId(d.u64()?),
        remaining: Duration::from_millis(d.u64()?),
        term: Duration::from_millis(d.u64()?),
    })
}

pub fn encode_request(corr: u64, holder: HolderId, req: &Request) -> Vec<u8> {
    let mut e = Enc::default();
    e.u64(corr).holder(holder);
    match req {
        Request::RegisterChannel { name, opts } => {
            e.str(name)
                .u8(enc_mode(opts.heap_mode))
                .u64(opts.initial_heap_size)
                .str(&opts.pool)
                .str(opts.fallback_endpoint.as_deref().unwrap_or(""));
            enc_nodes(&mut e, &opts.allow_nodes);
        }
        Request::LookupChannel { name } | Request::CloseChannel { name } => {
            e.str(name);
        }
        Request::AllocHeap {
            heap_id,
            size,
            channel,
        } => {
            e.u64(*heap_id).u64(*size).u64(*channel);
        }
        Request::ReleaseHeap { heap_id } => {
            e.u64(heap_id.0);
        }
        Request::RenewLease { lease_id } => {
            e.u64(lease_id.0);
        }
        Request::QuotaQuery { additional } => {
            e.u64(*additional);
        }
    }
    e.0
}

pub fn decode_request(kind: u16, payload: &[u8]) -> Result<(u64, HolderId, Request), OrchError> {
    let mut d = Dec::new(payload);
    let corr = d.u64()?;
    let holder = d.holder()?;
    let req = match kind {
        REGISTER_CHANNEL => {
            let name = d.str()?;
            let heap_mode = dec_mode(d.u8()?)?;
            let initial_heap_size = d.u64()?;
            let pool = d.str()?;
            let fb = d.str()?;
            let allow_nodes = dec_nodes(&mut d)?;
            Request::RegisterChannel {
                name,
                opts: ChannelOptions {
                    heap_mode,
                    initial_heap_size,
                    pool,
                    fallback_endpoint: (!fb.is_empty()).then_some(fb),
                    allow_nodes,
                },
            }
        }
        LOOKUP_CHANNEL => Request::LookupChannel { name: d.str()? },
        CLOSE_CHANNEL => Request::CloseChannel { name: d.str()? },
        ALLOC_HEAP => Request::AllocHeap {
            heap_id: d.u64()?,
            size: d.u64()?,
            channel: d.u64()?,
        },
        RELEASE_HEAP => Request::ReleaseHeap {
            heap_id: HeapId(d.u64()?),
        },
        RENEW_LEASE => Request::RenewLease {
            lease_id: LeaseId(d.u64()?),
        },
        QUOTA_QUERY => Request::QuotaQuery {
            additional: d.u64()?,
        },
        other => return Err(OrchError::Protocol(format!("unknown request type {other}"))),
    };
    d.finish()?;
    Ok((corr, holder, req))
}

fn error_code(e: &OrchError) -> u16 {
    match e {
        OrchError::DuplicateName(_) => 1,
        OrchError::MalformedName(_) => 2,
        OrchError::UnknownChannel(_) => 3,
        OrchError::UnknownHeap(_) => 4,
        OrchError::UnknownLease(_) => 5,
        OrchError::LeaseExpired(_) => 6,
        OrchError::QuotaExceeded { .. } => 7,
        OrchError::PoolExhausted => 8,
        OrchError::InvalidSize => 9,
        OrchError::AclDenied(_) => 10,
        OrchError::NotHolder { .. } => 11,
        OrchError::NotOwner(_) => 12,
        OrchError::Unreachable(_) => 13,
        OrchError::Protocol(_) => 14,
    }
}

fn enc_error(e: &mut Enc, err: &OrchError) {
    match err {
        OrchError::DuplicateName(s)
        | OrchError::MalformedName(s)
        | OrchError::UnknownChannel(s)
        | OrchError::AclDenied(s)
        | OrchError::NotOwner(s)
        | OrchError::Unreachable(s)
        | OrchError::Protocol(s) => {
            e.str(s);
        }
        OrchError::UnknownHeap(h) => {
            e.u64(h.0);
        }
        OrchError::UnknownLease(l) | OrchError::LeaseExpired(l) => {
            e.u64(l.0);
        }
        OrchError::QuotaExceeded { current, limit } => {
            e.u64(*current).u64(*limit);
        }
        OrchError::NotHolder { heap, holder } => {
            e.u64(heap.0).holder(*holder);
        }
        OrchError::PoolExhausted | OrchError::InvalidSize => {}
    }
}

fn dec_error(code: u16, d: &mut Dec) -> Result<OrchError, OrchError> {
    Ok(match code {
        1 => OrchError::DuplicateName(d.str()?),
        2 => OrchError::MalformedName(d.str()?),
        3 => OrchError::UnknownChannel(d.str()?),
        4 => OrchError::UnknownHeap(HeapId(d.u64()?)),
        5 => OrchError::UnknownLease(LeaseId(d.u64()?)),
        6 => OrchError::LeaseExpired(LeaseId(d.u64()?)),
        7 => OrchError::QuotaExceeded {
            current: d.u64()?,
            limit: d.u64()?,
        },
        8 => OrchError::PoolExhausted,
        9 => OrchError::InvalidSize,
        10 => OrchError::AclDenied(d.str()?),
        11 => OrchError::NotHolder {
            heap: HeapId(d.u64()?),
            holder: d.holder()?,
        },
        12 => OrchError::NotOwner(d.str()?),
        13 => OrchError::Unreachable(d.str()?),
        14 => OrchError::Protocol(d.str()?),
        other => OrchError::Protocol(format!("unknown error code {other}")),
    })
}

pub fn encode_response(corr: u64, res: &Result<Response, OrchError>) -> Vec<u8> {
    let mut e = Enc::default();
    e.u64(corr);
    match res {
        Err(err) => {
            e.u16(error_code(err));
            enc_error(&mut e, err);
        }
        Ok(r) => {
            e.u16(0);
            match r {
                Response::Channel(c) => {
                    e.u8(0);
                    enc_channel(&mut e, c);
                }
                Response::ChannelLeased(c, g) => {
                    e.u8(1);
                    enc_channel(&mut e, c);
                    enc_grant(&mut e, g);
                }
                Response::Heap(h, g) => {
                    e.u8(2);
                    enc_heap(&mut e, h);
                    enc_grant(&mut e, g);
                }
                Response::Renewed(rem) => {
                    e.u8(3).u64(rem.as_millis() as u64);
                }
                Response::Quota(QuotaDecision::Allow) => {
                    e.u8(4).u8(1).u64(0).u64(0);
                }
                Response::Quota(QuotaDecision::Deny { current, limit }) => {
                    e.u8(4).u8(0).u64(*current).u64(*limit);
                }
                Response::Done => {
                    e.u8(5);
                }
                Response::Released(r) => {
                    e.u8(6).u8(*r as u8);
                }
            }
        }
    }
    e.0
}

pub fn decode_response(payload: &[u8]) -> Result<(u64, Result<Response, OrchError>), OrchError> {
    let mut d = Dec::new(payload);
    let corr = d.u64()?;
    let status = d.u16()?;
    if status != 0 {
        let err = dec_error(status, &mut d)?;
        d.finish()?;
        return Ok((corr, Err(err)));
    }
    let r = match d.u8()? {
        0 => Response::Channel(dec_channel(&mut d)?),
        1 => {
            let c = dec_channel(&mut d)?;
            Response::ChannelLeased(c, dec_grant(&mut d)?)
        }
        2 => {
            let h = dec_heap(&mut d)?;
            Response::Heap(h, dec_grant(&mut d)?)
        }
        3 => Response::Renewed(Duration::from_millis(d.u64()?)),
        4 => {
            let allow = d.u8()? != 0;
            let current = d.u64()?;
            let limit = d.u64()?;
            Response::Quota(if allow {
                QuotaDecision::Allow
            } else {
                QuotaDecision::Deny { current, limit }
            })
        }
        5 => Response::Done,
        6 => Response::Released(d.u8()? != 0),
        t => return Err(OrchError::Protocol(format!("unknown response tag {t}"))),
    };
    d.finish()?;
    Ok((corr, Ok(r)))
}

pub fn encode_notify(n: &FailureNotification) -> Vec<u8> {
    let mut e = Enc::default();
    e.holder(n.recipient)
        .holder(n.failed)
        .u64(n.heap_id.0)
        .str(n.channel.as_deref().unwrap_or(""));
    e.0
}

pub fn decode_notify(payload: &[u8]) -> Result<FailureNotification, OrchError> {
    let mut d = Dec::new(payload);
    let recipient = d.holder()?;
    let failed = d.holder()?;
    let heap_id = HeapId(d.u64()?);
    let ch = d.str()?;
    d.finish()?;
    Ok(FailureNotification {
        recipient,
        failed,
        heap_id,
        channel: (!ch.is_empty()).then_some(ch),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec() -> ChannelRecord {
        ChannelRecord {
            channel_id: ChannelId(9),
            name: "/x/y".into(),
            heap_mode: HeapMode::PerConnection,
            server: HolderId::new(1, 2, 3),
            pool: "/dev/shm/p".into(),
            fallback_endpoint: Some("127.0.0.1:9".into()),
            allow_nodes: vec![4, 5],
            heaps: vec![HeapDescriptor {
                heap_id: HeapId(3),
                base: 0x7000,
                size: 4096,
                backing: "heap-3".into(),
            }],
        }
    }

    #[test]
    fn frame_layout_is_little_endian() {
        let mut out = Vec::new();
        write_frame(&mut out, 0x8003, &[0xAA, 0xBB]).unwrap();
        assert_eq!(out, vec![2, 0, 0, 0, 0x03, 0x80, 0xAA, 0xBB]);
        let (k, p) = read_frame(&mut &out[..]).unwrap().unwrap();
        assert_eq!((k, p), (0x8003, vec![0xAA, 0xBB]));
        assert!(read_frame(&mut &[][..]).unwrap().is_none());
    }

    #[test]
    fn requests_round_trip() {
        let h = HolderId::new(7, 8, 9);
        let reqs = [
            Request::RegisterChannel {
                name: "/a".into(),
                opts: ChannelOptions {
                    heap_mode: HeapMode::ChannelWide,
                    initial_heap_size: 1 << 20,
                    pool: "p".into(),
                    fallback_endpoint: None,
                    allow_nodes: vec![1],
                },
            },
            Request::LookupChannel { name: "/a".into() },
            Request::AllocHeap {
                heap_id: 0,
                size: 4096,
                channel: 2,
            },
            Request::ReleaseHeap { heap_id: HeapId(4) },
            Request::RenewLease { lease_id: LeaseId(5) },
            Request::QuotaQuery { additional: 77 },
            Request::CloseChannel { name: "/a".into() },
        ];
        for (i, r) in reqs.iter().enumerate() {
            let bytes = encode_request(i as u64, h, r);
            assert_eq!(decode_request(r.kind(), &bytes).unwrap(), (i as u64, h, r.clone()));
        }
    }

    #[test]
    fn responses_and_errors_round_trip() {
        let g = LeaseGrant {
            lease_id: LeaseId(1),
            heap_id: HeapId(3),
            remaining: Duration::from_millis(2999),
            term: Duration::from_millis(3000),
        };
        let cases: Vec<Result<Response, OrchError>> = vec![
            Ok(Response::Channel(rec())),
            Ok(Response::ChannelLeased(rec(), g)),
            Ok(Response::Heap(rec().heaps[0].clone(), g)),
            Ok(Response::Renewed(Duration::from_millis(3000))),
            Ok(Response::Quota(QuotaDecision::Allow)),
            Ok(Response::Quota(QuotaDecision::Deny { current: 1, limit: 2 })),
            Ok(Response::Done),
            Ok(Response::Released(true)),
            Err(OrchError::QuotaExceeded { current: 5, limit: 6 }),
            Err(OrchError::NotHolder {
                heap: HeapId(1),
                holder: HolderId::new(1, 1, 1),
            }),
            Err(OrchError::PoolExhausted),
            Err(OrchError::DuplicateName("/a".into())),
        ];
        for (i, c) in cases.into_iter().enumerate() {
            let bytes = encode_response(i as u64, &c);
            assert_eq!(decode_response(&bytes).unwrap(), (i as u64, c));
        }
    }

    #[test]
    fn truncated_input_is_a_protocol_error() {
        let bytes = encode_request(1, HolderId::new(1, 1, 1), &Request::LookupChannel { name: "/abc".into() });
        for cut in 0..bytes.len() {
            assert!(decode_request(LOOKUP_CHANNEL, &bytes[..cut]).is_err());
        }
    }
}
