//! Randomized two-node page workload over a fallback session, checked
//! against a sequential replay.
//!
//! Each step gives both nodes a list of word reads and writes that run at
//! the same time. In a race step both nodes work on the same pages, node A
//! on even words and node B on odd ones, so the two lists commute and the
//! replay can run A's list and then B's.

use std::fmt::Write as _;
use std::net::TcpListener;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpcool::fallback::{Frame, Session, SessionEvents, Side};
use rpcool::heap::PAGE;
use rpcool::orchestrator::HeapDescriptor;
use rpcool::runtime::ensure_thread_access;
use rpcool::HeapId;

use crate::harness::{peer_runtime, reply, serve_stdin, Harness};

pub const WORDS: u64 = PAGE / 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Read { page: u64, word: u64 },
    Write { page: u64, word: u64, value: u64 },
}

impl Op {
    fn slot(&self) -> (u64, u64) {
        match *self {
            Op::Read { page, word } | Op::Write { page, word, .. } => (page, word),
        }
    }

    fn encode(&self, s: &mut String) {
        let _ = match *self {
            Op::Read { page, word } => write!(s, " r.{page}.{word}"),
            Op::Write { page, word, value } => write!(s, " w.{page}.{word}.{value:x}"),
        };
    }

    fn decode(t: &str) -> anyhow::Result<Self> {
        let f: Vec<&str> = t.split('.').collect();
        match (f.first().copied(), f.len()) {
            (Some("r"), 3) => Ok(Op::Read {
                page: f[1].parse()?,
                word: f[2].parse()?,
            }),
            (Some("w"), 4) => Ok(Op::Write {
                page: f[1].parse()?,
                word: f[2].parse()?,
                value: u64::from_str_radix(f[3], 16)?,
            }),
            _ => anyhow::bail!("bad op {t:?}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Step {
    pub a: Vec<Op>,
    pub b: Vec<Op>,
}

impl Step {
    pub fn is_race(&self) -> bool {
        self.a.iter().any(|x| self.b.iter().any(|y| x.slot().0 == y.slot().0))
    }
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub pages: u64,
    pub steps: Vec<Step>,
}

impl Workload {
    /// About `ops` operations over `pages` pages; roughly `race` of the
    /// steps are same-page races.
    pub fn generate(seed: u64, ops: usize, pages: u64, race: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut steps = Vec::new();
        let mut n = 0;
        let op = |rng: &mut ChaCha8Rng, page: u64, word: u64| {
            if rng.gen_bool(0.5) {
                Op::Read { page, word }
            } else {
                Op::Write {
                    page,
                    word,
                    value: rng.gen(),
                }
            }
        };
        while n < ops {
            let mut s = Step::default();
            if rng.gen_bool(race) {
                let mut set: Vec<u64> = (0..pages).collect();
                set.shuffle(&mut rng);
                set.truncate(rng.gen_range(1..=2));
                for (list, parity) in [(&mut s.a, 0), (&mut s.b, 1)] {
                    for _ in 0..rng.gen_range(1..=6) {
                        let page = *set.choose(&mut rng).unwrap();
                        let word = rng.gen_range(0..WORDS / 2) * 2 + parity;
                        list.push(op(&mut rng, page, word));
                    }
                }
            } else {
                let list = if rng.gen_bool(0.5) { &mut s.a } else { &mut s.b };
                for _ in 0..rng.gen_range(1..=4) {
                    let (page, word) = (rng.gen_range(0..pages), rng.gen_range(0..WORDS));
                    list.push(op(&mut rng, page, word));
                }
            }
            n += s.a.len() + s.b.len();
            steps.push(s);
        }
        Self { pages, steps }
    }

    pub fn ops(&self) -> usize {
        self.steps.iter().map(|s| s.a.len() + s.b.len()).sum()
    }
}

fn apply(mem: &mut [u64], ops: &[Op]) -> Vec<u64> {
    let mut reads = Vec::new();
    for op in ops {
        match *op {
            Op::Read { page, word } => reads.push(mem[(page * WORDS + word) as usize]),
            Op::Write { page, word, value } => mem[(page * WORDS + word) as usize] = value,
        }
    }
    reads
}

/// Read results of every step for each node, and the final memory.
pub struct Replay {
    pub reads: Vec<(Vec<u64>, Vec<u64>)>,
    pub memory: Vec<u64>,
}

/// Sequential oracle: A's list, then B's, step by step, from zeroed memory.
pub fn replay(w: &Workload) -> Replay {
    let mut memory = vec![0u64; (w.pages * WORDS) as usize];
    let reads = w
        .steps
        .iter()
        .map(|s| {
            let a = apply(&mut memory, &s.a);
            let b = apply(&mut memory, &s.b);
            (a, b)
        })
        .collect();
    Replay { reads, memory }
}

/// Runs `ops` against the mirror at `base`.
fn execute(base: u64, ops: &[Op]) -> Vec<u64> {
    let mut reads = Vec::new();
    for op in ops {
        let (page, word) = op.slot();
        let p = (base + page * PAGE + word * 8) as *mut u64;
        // SAFETY: inside the mirror mapping; absent pages are fetched by the
        // session on fault.
        unsafe {
            match *op {
                Op::Read { .. } => reads.push(std::ptr::read_volatile(p)),
                Op::Write { value, .. } => std::ptr::write_volatile(p, value),
            }
        }
    }
    reads
}

fn dump(base: u64, pages: u64) -> Vec<u64> {
    (0..pages * WORDS)
        // SAFETY: as in `execute`.
        .map(|i| unsafe { std::ptr::read_volatile((base + i * 8) as *const u64) })
        .collect()
}

struct Quiet;

impl SessionEvents for Quiet {
    fn frame(&self, _: &Session, _: Frame) {}
}

fn parse_words(s: &str) -> anyhow::Result<Vec<u64>> {
    s.split_whitespace()
        .map(|t| u64::from_str_radix(t, 16).map_err(Into::into))
        .collect()
}

fn words_line(tag: &str, v: &[u64]) -> String {
    let mut s = String::from(tag);
    for x in v {
        let _ = write!(s, " {x:x}");
    }
    s
}

/// Peer role `coherence <addr> <heap> <base> <size> <backing>`: node B.
pub fn peer(args: &[String]) -> anyhow::Result<()> {
    anyhow::ensure!(args.len() >= 5, "coherence peer needs addr heap base size backing");
    let desc = HeapDescriptor {
        heap_id: HeapId(args[1].parse()?),
        base: args[2].parse()?,
        size: args[3].parse()?,
        backing: args[4..].join(" "),
    };
    let rt = peer_runtime(3, false)?;
    let map = rt.attach_mirror_heap(&desc)?;
    let stream = std::net::TcpStream::connect(&args[0])?;
    let session = Session::establish(stream, map, Side::Client, Arc::new(Quiet))?;
    ensure_thread_access();
    let pages = desc.size / PAGE;
    serve_stdin("client", |line| {
        if let Some(rest) = line.strip_prefix("STEP") {
            let ops = rest.split_whitespace().map(Op::decode).collect::<anyhow::Result<Vec<_>>>()?;
            reply(words_line("DONE", &execute(desc.base, &ops)));
        } else if line == "DUMP" {
            reply(words_line("DUMP", &dump(desc.base, pages)));
        } else {
            anyhow::bail!("unknown command {line:?}");
        }
        Ok(true)
    })?;
    session.close();
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct CoherenceOutcome {
    pub ops: usize,
    pub steps: usize,
    pub race_steps: usize,
    pub reads_checked: usize,
    pub divergences: usize,
    pub pages_moved: u64,
    pub elapsed: Duration,
}

impl CoherenceOutcome {
    pub fn ok(&self) -> bool {
        self.divergences == 0 && self.race_steps > 0 && self.reads_checked > 0
    }
}

/// Runs `w` with this process as node A (the session's server side) and a
/// peer as node B.
pub fn run(h: &Harness, w: &Workload) -> anyhow::Result<CoherenceOutcome> {
    let t0 = Instant::now();
    let rt = h.runtime(2)?;
    let map = rt.alloc_mirror_heap(w.pages * PAGE, None)?;
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();
    let d = (map.heap_id().0.to_string(), map.base().to_string(), map.size().to_string());
    let backing = map.descriptor().backing.clone();
    let mut peer = h.spawn("coherence", &[&addr, &d.0, &d.1, &d.2, &backing])?;
    let (stream, _) = listener.accept()?;
    let session = Session::establish(stream, map.clone(), Side::Server, Arc::new(Quiet))?;
    ensure_thread_access();
    let base = map.base();

    let oracle = replay(w);
    let mut out = CoherenceOutcome {
        ops: w.ops(),
        steps: w.steps.len(),
        ..Default::default()
    };
    for (s, (want_a, want_b)) in w.steps.iter().zip(&oracle.reads) {
        if s.is_race() {
            out.race_steps += 1;
        }
        if !s.b.is_empty() {
            let mut line = String::from("STEP");
            s.b.iter().for_each(|o| o.encode(&mut line));
            peer.send(&line)?;
        }
        let got_a = execute(base, &s.a);
        let got_b = if s.b.is_empty() {
            Vec::new()
        } else {
            parse_words(&peer.expect("DONE")?)?
        };
        out.reads_checked += want_a.len() + want_b.len();
        out.divergences += count_diff(want_a, &got_a) + count_diff(want_b, &got_b);
    }
    let mine = dump(base, w.pages);
    let theirs = parse_words(&peer.request("DUMP", "DUMP")?)?;
    out.divergences += count_diff(&oracle.memory, &mine) + count_diff(&oracle.memory, &theirs);
    out.pages_moved = session.stats().pages_in + session.stats().pages_out;
    peer.finish(Duration::from_secs(10))?;
    session.close();
    out.elapsed = t0.elapsed();
    Ok(out)
}

fn count_diff(want: &[u64], got: &[u64]) -> usize {
    want.iter().zip(got).filter(|(a, b)| a != b).count() + want.len().abs_diff(got.len())
}
