//! Wire frames of the fallback transport.
//!
//! Every frame is `len: u32` (little endian, counting the type byte and the
//! payload) followed by `type: u8` and the payload:
//!
//! | type | name        | payload |
//! |-----:|-------------|---------|
//! | 1    | `PAGE_REQ`  | `page: u64, write: u8` |
//! | 2    | `PAGE_DATA` | `page: u64, epoch: u64`, then one page of bytes |
//! | 3    | `RPC_REQ`   | the 56-byte request message |
//! | 4    | `RPC_RESP`  | `call_slot: u32, code: u32, sequence: u64, ret: u64` |
//! | 5    | `SEAL_INFO` | `index: u32, state: u8, start: u64, len: u64, epoch: u64` |
//! | 6    | `BYE`       | empty |
//! | 7    | `HELLO`     | `kind: u8` then per kind, see [`Hello`] |
//!
//! Strings in `HELLO` are `len: u16` followed by UTF-8 bytes.

use std::io::{self, Read, Write};

use crate::ids::{HeapId, HolderId};
use crate::orchestrator::HeapDescriptor;
use crate::rpc::{RpcMessage, MESSAGE_SIZE};
use crate::seal::DescriptorImage;

pub const PAGE_REQ: u8 = 1;
pub const PAGE_DATA: u8 = 2;
pub const RPC_REQ: u8 = 3;
pub const RPC_RESP: u8 = 4;
pub const SEAL_INFO: u8 = 5;
pub const BYE: u8 = 6;
pub const HELLO: u8 = 7;

/// Largest frame accepted; a page plus its header with room to spare.
pub const MAX_FRAME: u32 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Hello {
    /// Client to server: which channel, and who is asking.
    Request {
        channel: String,
        holder: HolderId,
        page_size: u32,
    },
    /// Server to client: the heap both sides mirror.
    Accept { heap: HeapDescriptor, page_size: u32 },
    Reject(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    PageReq { page: u64, write: bool },
    PageData { page: u64, epoch: u64, bytes: Vec<u8> },
    RpcReq(RpcMessage),
    RpcResp { call_slot: u32, code: u32, sequence: u64, ret: u64 },
    SealInfo(DescriptorImage),
    Bye,
    Hello(Hello),
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> io::Result<&'a [u8]> {
        let s = self.b.get(self.at..self.at + n).ok_or_else(|| bad("short frame"))?;
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> io::Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> io::Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> io::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> io::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> io::Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }

    fn done(&self) -> io::Result<()> {
        if self.at == self.b.len() {
            Ok(())
        } else {
            Err(bad("trailing bytes in frame"))
        }
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    let b = &s.as_bytes()[..s.len().min(u16::MAX as usize)];
    out.extend_from_slice(&(b.len() as u16).to_le_bytes());
    out.extend_from_slice(b);
}

impl Frame {
    pub fn kind(&self) -> u8 {
        match self {
            Frame::PageReq { .. } => PAGE_REQ,
            Frame::PageData { .. } => PAGE_DATA,
            Frame::RpcReq(_) => RPC_REQ,
            Frame::RpcResp { .. } => RPC_RESP,
            Frame::SealInfo(_) => SEAL_INFO,
            Frame::Bye => BYE,
            Frame::Hello(_) => HELLO,
        }
    }

    /// Type byte and payload, without the length prefix.
    pub fn body(&self) -> Vec<u8> {
        let mut o = vec![self.kind()];
        match self {
            Frame::PageReq { page, write } => {
                o.extend_from_slice(&page.to_le_bytes());
                o.push(*write as u8);
            }
            Frame::PageData { page, epoch, bytes } => {
                o.extend_from_slice(&page.to_le_bytes());
                o.extend_from_slice(&epoch.to_le_bytes());
                o.extend_from_slice(bytes);
            }
            Frame::RpcReq(m) => o.extend_from_slice(&m.encode()),
            Frame::RpcResp {
                call_slot,
                code,
                sequence,
                ret,
            } => {
                o.extend_from_slice(&call_slot.to_le_bytes());
                o.extend_from_slice(&code.to_le_bytes());
                o.extend_from_slice(&sequence.to_le_bytes());
                o.extend_from_slice(&ret.to_le_bytes());
            }
            Frame::SealInfo(d) => {
                o.extend_from_slice(&d.index.to_le_bytes());
                o.push(d.state);
                o.extend_from_slice(&d.start.to_le_bytes());
                o.extend_from_slice(&d.len.to_le_bytes());
                o.extend_from_slice(&d.epoch.to_le_bytes());
            }
            Frame::Bye => {}
            Frame::Hello(h) => match h {
                Hello::Request {
                    channel,
                    holder,
                    page_size,
                } => {
                    o.push(0);
                    o.extend_from_slice(&holder.node.to_le_bytes());
                    o.extend_from_slice(&holder.pid.to_le_bytes());
                    o.extend_from_slice(&holder.incarnation.to_le_bytes());
                    o.extend_from_slice(&page_size.to_le_bytes());
                    put_string(&mut o, channel);
                }
                Hello::Accept { heap, page_size } => {
                    o.push(1);
                    o.extend_from_slice(&heap.heap_id.0.to_le_bytes());
                    o.extend_from_slice(&heap.base.to_le_bytes());
                    o.extend_from_slice(&heap.size.to_le_bytes());
                    o.extend_from_slice(&page_size.to_le_bytes());
                    put_string(&mut o, &heap.backing);
                }
                Hello::Reject(msg) => {
                    o.push(2);
                    put_string(&mut o, msg);
                }
            },
        }
        o
    }

    pub fn decode(body: &[u8]) -> io::Result<Frame> {
        let (&kind, rest) = body.split_first().ok_or_else(|| bad("empty frame"))?;
        let mut c = Cursor { b: rest, at: 0 };
        let f = match kind {
            PAGE_REQ => Frame::PageReq {
                page: c.u64()?,
                write: c.u8()? != 0,
            },
            PAGE_DATA => {
                let page = c.u64()?;
                let epoch = c.u64()?;
                let bytes = c.take(rest.len() - 16)?.to_vec();
                Frame::PageData { page, epoch, bytes }
            }
            RPC_REQ => Frame::RpcReq(RpcMessage::decode(c.take(MESSAGE_SIZE)?).unwrap()),
            RPC_RESP => Frame::RpcResp {
                call_slot: c.u32()?,
                code: c.u32()?,
                sequence: c.u64()?,
                ret: c.u64()?,
            },
            SEAL_INFO => {
                let index = c.u32()?;
                let state = c.u8()?;
                Frame::SealInfo(DescriptorImage {
                    index,
                    state,
                    start: c.u64()?,
                    len: c.u64()?,
                    epoch: c.u64()?,
                })
            }
            BYE => Frame::Bye,
            HELLO => Frame::Hello(match c.u8()? {
                0 => {
                    let holder = HolderId::new(c.u32()?, c.u32()?, c.u32()?);
                    let page_size = c.u32()?;
                    Hello::Request {
                        channel: c.string()?,
                        holder,
                        page_size,
                    }
                }
                1 => {
                    let heap_id = HeapId(c.u64()?);
                    let base = c.u64()?;
                    let size = c.u64()?;
                    let page_size = c.u32()?;
                    Hello::Accept {
                        heap: HeapDescriptor {
                            heap_id,
                            base,
                            size,
                            backing: c.string()?,
                        },
                        page_size,
                    }
                }
                2 => Hello::Reject(c.string()?),
                k => return Err(bad(format!("unknown hello kind {k}"))),
            }),
            k => return Err(bad(format!("unknown frame type {k}"))),
        };
        c.done()?;
        Ok(f)
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        let body = self.body();
        let mut out = Vec::with_capacity(4 + body.len());
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
        w.write_all(&out)
    }

    pub fn read_from(r: &mut impl Read) -> io::Result<Frame> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let len = u32::from_le_bytes(len);
        if len == 0 || len > MAX_FRAME {
            return Err(bad(format!("frame length {len}")));
        }
        let mut body = vec![0u8; len as usize];
        r.read_exact(&mut body)?;
        Frame::decode(&body)
    }
}

/// Writes a `PAGE_DATA` frame straight from page memory.
pub fn write_page_data(w: &mut impl Write, page: u64, epoch: u64, bytes: &[u8]) -> io::Result<()> {
    let mut head = [0u8; 21];
    head[0..4].copy_from_slice(&((1 + 16 + bytes.len()) as u32).to_le_bytes());
    head[4] = PAGE_DATA;
    head[5..13].copy_from_slice(&page.to_le_bytes());
    head[13..21].copy_from_slice(&epoch.to_le_bytes());
    w.write_all(&head)?;
    w.write_all(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn round_trip(f: Frame) {
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        assert_eq!(u32::from_le_bytes(buf[0..4].try_into().unwrap()) as usize, buf.len() - 4);
        assert_eq!(buf[4], f.kind());
        assert_eq!(Frame::read_from(&mut buf.as_slice()).unwrap(), f);
    }

    #[test]
    fn every_frame_round_trips() {
        round_trip(Frame::PageReq { page: 9, write: true });
        round_trip(Frame::PageData {
            page: 3,
            epoch: 4,
            bytes: vec![0xAB; 4096],
        });
        round_trip(Frame::RpcReq(RpcMessage {
            sequence: 1,
            function: 2,
            arg: 3,
            ..Default::default()
        }));
        round_trip(Frame::RpcResp {
            call_slot: 1,
            code: 0x10003,
            sequence: 8,
            ret: 0xdead,
        });
        round_trip(Frame::SealInfo(DescriptorImage {
            index: 2,
            start: 0x1000,
            len: 0x2000,
            state: 1,
            epoch: 5,
        }));
        round_trip(Frame::Bye);
        round_trip(Frame::Hello(Hello::Request {
            channel: "/svc/a".into(),
            holder: HolderId::new(1, 2, 3),
            page_size: 4096,
        }));
        round_trip(Frame::Hello(Hello::Accept {
            heap: HeapDescriptor {
                heap_id: HeapId(4),
                base: 0x7c00_0000_0000,
                size: 1 << 20,
                backing: "heap-4".into(),
            },
            page_size: 4096,
        }));
        round_trip(Frame::Hello(Hello::Reject("no".into())));
    }

    #[test]
    fn page_data_fast_path_matches_encoder() {
        let bytes = vec![7u8; 4096];
        let mut a = Vec::new();
        write_page_data(&mut a, 12, 34, &bytes).unwrap();
        let mut b = Vec::new();
        Frame::PageData { page: 12, epoch: 34, bytes }.write_to(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_frames_rejected() {
        assert!(Frame::read_from(&mut [0u8, 0, 0, 0].as_slice()).is_err());
        assert!(Frame::decode(&[99]).is_err());
        assert!(Frame::decode(&[PAGE_REQ, 1, 2]).is_err());
        assert!(Frame::decode(&[BYE, 0]).is_err());
        let huge = (MAX_FRAME + 1).to_le_bytes();
        assert!(Frame::read_from(&mut huge.as_slice()).is_err());
    }
}
