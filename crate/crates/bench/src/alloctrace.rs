//! Randomized allocate/free traces from several processes on one heap,
//! checked against an interval oracle.
//!
//! Every process takes a ticket from a counter in the heap right after each
//! allocation returns and right before each free. Replaying all events in
//! ticket order, an allocation's ticket interval lies inside its real
//! lifetime, so two allocations the replay sees live at once really were.
//! Each process also stamps its allocations with a tag and checks the tag
//! before freeing, which catches overlaps the replay cannot see.

use std::collections::BTreeMap;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpcool::heap::{Scope, SharedHeap, ShmAlloc, PAGE};
use rpcool::HeapId;

use crate::harness::{peer_runtime, reply, serve_stdin, Harness};

const TICKET_ROOT: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Alloc,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub ticket: u64,
    pub kind: EventKind,
    pub addr: u64,
    pub len: u64,
}

const RECORD: usize = 25;

impl Event {
    fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.ticket.to_le_bytes())?;
        w.write_all(&[self.kind as u8])?;
        w.write_all(&self.addr.to_le_bytes())?;
        w.write_all(&self.len.to_le_bytes())
    }

    fn read(b: &[u8]) -> Self {
        let u = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        Self {
            ticket: u(0),
            kind: if b[8] == 0 { EventKind::Alloc } else { EventKind::Free },
            addr: u(9),
            len: u(17),
        }
    }
}

/// Live ranges, replayed in event order.
#[derive(Debug, Default)]
pub struct IntervalOracle {
    live: BTreeMap<u64, u64>,
    pub overlaps: u64,
    /// Frees of ranges that were not live.
    pub bad_frees: u64,
    pub events: u64,
}

impl IntervalOracle {
    pub fn alloc(&mut self, addr: u64, len: u64) {
        self.events += 1;
        let end = addr + len.max(1);
        let before = self.live.range(..end).next_back();
        if before.is_some_and(|(_, &e)| e > addr) {
            self.overlaps += 1;
        }
        self.live.insert(addr, end);
    }

    pub fn free(&mut self, addr: u64) {
        self.events += 1;
        if self.live.remove(&addr).is_none() {
            self.bad_frees += 1;
        }
    }

    pub fn live(&self) -> usize {
        self.live.len()
    }

    /// Replays events sorted by ticket.
    pub fn replay(events: &mut [Event]) -> Self {
        events.sort_by_key(|e| e.ticket);
        let mut o = Self::default();
        for e in events.iter() {
            match e.kind {
                EventKind::Alloc => o.alloc(e.addr, e.len),
                EventKind::Free => o.free(e.addr),
            }
        }
        o
    }
}

fn tag_word(tag: u64, addr: u64) -> u64 {
    tag.rotate_left(17) ^ addr
}

/// Writes the tag over every word of `[addr, addr + len)`.
fn stamp(addr: u64, len: u64, tag: u64) {
    for a in (addr..addr + len / 8 * 8).step_by(8) {
        // SAFETY: inside an allocation this process owns.
        unsafe { std::ptr::write_volatile(a as *mut u64, tag_word(tag, a)) };
    }
}

fn stamped(addr: u64, len: u64, tag: u64) -> bool {
    (addr..addr + len / 8 * 8)
        .step_by(8)
        // SAFETY: as in `stamp`.
        .all(|a| unsafe { std::ptr::read_volatile(a as *const u64) } == tag_word(tag, a))
}

#[derive(Debug, Default, Clone, Copy)]
pub struct LocalCounts {
    pub ops: u64,
    pub tag_errors: u64,
    pub scope_escapes: u64,
    pub scope_allocs: u64,
    pub exhausted: u64,
}

/// One process's share of the trace.
pub fn drive(heap: &SharedHeap, seed: u64, ops: u64, log: &mut impl Write) -> anyhow::Result<LocalCounts> {
    let ticket = heap.root(TICKET_ROOT)?;
    // SAFETY: the root slot holds the address of a u64 in the heap.
    let ticket = unsafe { &*(ticket as *const AtomicU64) };
    let take = || ticket.fetch_add(1, Ordering::SeqCst);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag_base = (std::process::id() as u64) << 32;
    let mut live: Vec<(u64, u64, u64)> = Vec::new();
    let mut scopes: Vec<(Scope, u64, u64)> = Vec::new();
    let mut c = LocalCounts::default();
    let mut seq = 0u64;

    while c.ops < ops {
        c.ops += 1;
        // On few cores, give the other processes a turn now and then.
        if rng.gen_bool(0.2) {
            std::thread::yield_now();
        }
        let roll = rng.gen_range(0..100);
        if roll < 45 || (live.is_empty() && scopes.is_empty()) {
            let len = match rng.gen_range(0..10) {
                0..=6 => rng.gen_range(1..=2048),
                7 | 8 => rng.gen_range(2049..=3 * PAGE),
                _ => rng.gen_range(1..=16) * PAGE,
            };
            let align = [8, 16, 64, PAGE][rng.gen_range(0..4)];
            match heap.alloc(len, align) {
                Ok(addr) => {
                    let t = take();
                    Event { ticket: t, kind: EventKind::Alloc, addr, len }.write(log)?;
                    seq += 1;
                    stamp(addr, len, tag_base | seq);
                    live.push((addr, len, tag_base | seq));
                }
                Err(_) => c.exhausted += 1,
            }
        } else if roll < 90 && !live.is_empty() {
            let (addr, len, tag) = live.swap_remove(rng.gen_range(0..live.len()));
            if !stamped(addr, len, tag) {
                c.tag_errors += 1;
            }
            let t = take();
            Event { ticket: t, kind: EventKind::Free, addr, len }.write(log)?;
            heap.free(addr)?;
        } else if roll < 95 || scopes.is_empty() {
            let size = rng.gen_range(1..=8) * PAGE;
            match heap.create_scope(size) {
                Ok(s) => {
                    let t = take();
                    Event { ticket: t, kind: EventKind::Alloc, addr: s.start(), len: s.len() }.write(log)?;
                    seq += 1;
                    // Fill the scope with small objects until it is full.
                    let tag = tag_base | seq;
                    let mut objs = Vec::new();
                    while let Ok(a) = s.alloc(rng.gen_range(1..=512), 8) {
                        c.scope_allocs += 1;
                        objs.push(a);
                    }
                    let mut prev = s.start();
                    for (i, &a) in objs.iter().enumerate() {
                        let end = objs.get(i + 1).copied().unwrap_or(s.end());
                        if !s.contains(a) || a < prev || end > s.end() {
                            c.scope_escapes += 1;
                        }
                        stamp(a, end - a, tag);
                        prev = a;
                    }
                    let first = objs.first().copied().unwrap_or(s.end());
                    scopes.push((s, tag, first));
                }
                Err(_) => c.exhausted += 1,
            }
        } else {
            let (s, tag, first) = scopes.swap_remove(rng.gen_range(0..scopes.len()));
            if !stamped(first, (s.end() - first).min(256), tag) {
                c.tag_errors += 1;
            }
            let t = take();
            Event { ticket: t, kind: EventKind::Free, addr: s.start(), len: s.len() }.write(log)?;
            s.destroy()?;
        }
    }
    for (addr, len, tag) in live {
        if !stamped(addr, len, tag) {
            c.tag_errors += 1;
        }
        let t = take();
        Event { ticket: t, kind: EventKind::Free, addr, len }.write(log)?;
        heap.free(addr)?;
    }
    for (s, _, _) in scopes {
        let t = take();
        Event { ticket: t, kind: EventKind::Free, addr: s.start(), len: s.len() }.write(log)?;
        s.destroy()?;
    }
    log.flush()?;
    Ok(c)
}

fn read_log(path: &Path) -> anyhow::Result<Vec<Event>> {
    let mut b = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut b)?;
    anyhow::ensure!(b.len() % RECORD == 0, "torn log {}", path.display());
    Ok(b.chunks(RECORD).map(Event::read).collect())
}

/// Peer role `alloc <heap> <seed> <ops> <log>`: waits for `GO`, runs its
/// trace and answers `DONE ops tag_errors scope_escapes scope_allocs`.
pub fn peer(args: &[String]) -> anyhow::Result<()> {
    anyhow::ensure!(args.len() == 4, "alloc peer needs heap seed ops log");
    let rt = peer_runtime(4, true)?;
    let map = rt.attach_heap(HeapId(args[0].parse()?))?;
    let heap = SharedHeap::open(map)?;
    let (seed, ops): (u64, u64) = (args[1].parse()?, args[2].parse()?);
    let path = args[3].clone();
    serve_stdin("alloc", |line| {
        anyhow::ensure!(line == "GO", "unknown command {line:?}");
        let mut log = BufWriter::new(std::fs::File::create(&path)?);
        let c = drive(&heap, seed, ops, &mut log)?;
        reply(format!("DONE {} {} {} {}", c.ops, c.tag_errors, c.scope_escapes, c.scope_allocs));
        Ok(true)
    })
}

#[derive(Debug, Clone, Default)]
pub struct AllocOutcome {
    pub processes: usize,
    pub ops: u64,
    pub events: u64,
    pub overlaps: u64,
    pub bad_frees: u64,
    pub tag_errors: u64,
    pub scope_allocs: u64,
    pub scope_escapes: u64,
    pub leaked: usize,
    /// Places in ticket order where one process's events follow another's.
    pub interleavings: u64,
    pub elapsed: Duration,
}

impl AllocOutcome {
    pub fn ok(&self) -> bool {
        self.events > 0
            && self.overlaps == 0
            && self.bad_frees == 0
            && self.tag_errors == 0
            && self.scope_escapes == 0
            && self.scope_allocs > 0
            && self.leaked == 0
            && (self.processes < 2 || self.interleavings > 0)
    }
}

/// `processes` peers share `ops` operations on one 64 MiB heap.
pub fn run(h: &Harness, processes: usize, ops: u64, seed: u64) -> anyhow::Result<AllocOutcome> {
    let t0 = Instant::now();
    let rt = h.runtime(5)?;
    let map = rt.alloc_heap(64 << 20, None)?;
    let heap = SharedHeap::format(map.clone())?;
    let ticket = heap.alloc_value(0u64)?;
    heap.set_root(TICKET_ROOT, ticket.addr())?;
    let dir = tempfile::tempdir()?;
    let id = map.heap_id().0.to_string();
    let per = ops / processes as u64;
    let mut peers = Vec::new();
    let mut logs = Vec::new();
    for i in 0..processes {
        let log = dir.path().join(format!("p{i}.log"));
        let s = (seed + i as u64).to_string();
        peers.push(h.spawn("alloc", &[&id, &s, &per.to_string(), log.to_str().unwrap()])?);
        logs.push(log);
    }
    for p in &mut peers {
        p.send("GO")?;
    }
    let mut out = AllocOutcome {
        processes,
        ..Default::default()
    };
    for p in &mut peers {
        let f: Vec<u64> = p.expect("DONE")?.split_whitespace().map(str::parse).collect::<Result<_, _>>()?;
        out.ops += f[0];
        out.tag_errors += f[1];
        out.scope_escapes += f[2];
        out.scope_allocs += f[3];
    }
    for p in peers {
        p.finish(Duration::from_secs(10))?;
    }
    let mut events = Vec::new();
    let mut owner = Vec::new();
    for (i, l) in logs.iter().enumerate() {
        let ev = read_log(l)?;
        owner.extend(ev.iter().map(|e| (e.ticket, i)));
        events.extend(ev);
    }
    owner.sort_unstable();
    out.interleavings = owner.windows(2).filter(|w| w[0].1 != w[1].1).count() as u64;
    let o = IntervalOracle::replay(&mut events);
    out.events = o.events;
    out.overlaps = o.overlaps;
    out.bad_frees = o.bad_frees;
    out.leaked = o.live();
    out.elapsed = t0.elapsed();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn oracle_flags_overlap_and_bad_free() {
        let mut o = IntervalOracle::default();
        o.alloc(100, 50);
        o.alloc(150, 10);
        assert_eq!(o.overlaps, 0);
        o.alloc(140, 20);
        assert_eq!(o.overlaps, 1);
        o.free(100);
        o.free(100);
        assert_eq!(o.bad_frees, 1);
    }

    #[test]
    fn events_round_trip() {
        let e = Event {
            ticket: 7,
            kind: EventKind::Free,
            addr: 0x7000_1000,
            len: 33,
        };
        let mut b = Vec::new();
        e.write(&mut b).unwrap();
        assert_eq!(b.len(), RECORD);
        assert_eq!(Event::read(&b), e);
    }

    proptest! {
        // Disjoint ranges never overlap, in any order; a duplicate always
        // does.
        #[test]
        fn disjoint_ranges_pass(lens in proptest::collection::vec(1u64..100, 1..50), dup in any::<prop::sample::Index>()) {
            let mut at = 0u64;
            let ranges: Vec<(u64, u64)> = lens.iter().map(|&l| { let r = (at, l); at += l; r }).collect();
            let mut o = IntervalOracle::default();
            for &(a, l) in ranges.iter().rev() {
                o.alloc(a, l);
            }
            prop_assert_eq!(o.overlaps, 0);
            let (a, l) = ranges[dup.index(ranges.len())];
            o.alloc(a + l / 2, 1);
            prop_assert_eq!(o.overlaps, 1);
        }
    }

    #[test]
    fn in_process_trace() {
        let map = rpcool::runtime::scratch_heap(&std::env::temp_dir(), 16 << 20).unwrap();
        let heap = SharedHeap::format(map).unwrap();
        let t = heap.alloc_value(0u64).unwrap();
        heap.set_root(TICKET_ROOT, t.addr()).unwrap();
        let mut log = Vec::new();
        let c = drive(&heap, 3, 3000, &mut log).unwrap();
        assert_eq!((c.tag_errors, c.scope_escapes), (0, 0));
        let mut ev: Vec<Event> = log.chunks(RECORD).map(Event::read).collect();
        let o = IntervalOracle::replay(&mut ev);
        assert_eq!((o.overlaps, o.bad_frees, o.live()), (0, 0, 0));
    }
}
