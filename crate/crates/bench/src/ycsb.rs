//! YCSB core workloads A to D over any key-value store.
//!
//! Keys are picked with a zipfian distribution (constant 0.99), scrambled
//! over the key space with a hash. D reads the most recent inserts.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde_json::{json, Map, Value};

pub const ZIPF_CONSTANT: f64 = 0.99;
pub const FIELDS: usize = 10;
pub const FIELD_LEN: usize = 100;

pub trait Kv {
    type Error: std::fmt::Display;
    /// Returns false if the key is absent.
    fn read(&mut self, key: &str) -> Result<bool, Self::Error>;
    fn update(&mut self, key: &str, v: &Value) -> Result<(), Self::Error>;
    fn insert(&mut self, key: &str, v: &Value) -> Result<(), Self::Error>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Workload {
    A,
    B,
    C,
    D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dist {
    Zipfian,
    Latest,
}

impl Workload {
    pub const ALL: [Workload; 4] = [Workload::A, Workload::B, Workload::C, Workload::D];

    pub fn name(self) -> &'static str {
        match self {
            Workload::A => "A",
            Workload::B => "B",
            Workload::C => "C",
            Workload::D => "D",
        }
    }

    /// (read, update, insert) proportions.
    pub fn mix(self) -> (f64, f64, f64) {
        match self {
            Workload::A => (0.5, 0.5, 0.0),
            Workload::B => (0.95, 0.05, 0.0),
            Workload::C => (1.0, 0.0, 0.0),
            Workload::D => (0.95, 0.0, 0.05),
        }
    }

    fn dist(self) -> Dist {
        match self {
            Workload::D => Dist::Latest,
            _ => Dist::Zipfian,
        }
    }
}

pub fn key(i: u64) -> String {
    format!("user{:016x}", i)
}

fn record(rng: &mut ChaCha8Rng) -> Value {
    let mut m = Map::new();
    for f in 0..FIELDS {
        let s: String = (0..FIELD_LEN).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
        m.insert(format!("field{f}"), json!(s));
    }
    Value::Object(m)
}

fn scramble(x: u64) -> u64 {
    // FNV-1a over the bytes of x.
    x.to_le_bytes().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[derive(Debug, Clone, Default)]
pub struct YcsbOutcome {
    pub reads: u64,
    pub updates: u64,
    pub inserts: u64,
    /// Reads of keys that should exist but were absent.
    pub misses: u64,
    pub latencies: Vec<Duration>,
    pub elapsed: Duration,
}

/// Inserts `records` records.
pub fn load<K: Kv>(kv: &mut K, records: u64, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..records {
        kv.insert(&key(i), &record(&mut rng)).map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// Runs `ops` operations of workload `w` against a store loaded with
/// `records` records.
pub fn run<K: Kv>(kv: &mut K, w: Workload, records: u64, ops: u64, seed: u64) -> Result<YcsbOutcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5943_5342);
    let mut count = records.max(1);
    let zipf = Zipf::new(count, ZIPF_CONSTANT).map_err(|e| e.to_string())?;
    let (read, update, _) = w.mix();
    let mut out = YcsbOutcome {
        latencies: Vec::with_capacity(ops as usize),
        ..Default::default()
    };
    let t0 = Instant::now();
    for _ in 0..ops {
        // Zipf samples are 1-based ranks.
        let rank = zipf.sample(&mut rng) as u64 - 1;
        let pick = match w.dist() {
            Dist::Zipfian => scramble(rank) % records.max(1),
            Dist::Latest => count - 1 - rank.min(count - 1),
        };
        let p: f64 = rng.gen();
        let t = Instant::now();
        if p < read {
            out.reads += 1;
            if !kv.read(&key(pick)).map_err(|e| e.to_string())? {
                out.misses += 1;
            }
        } else if p < read + update {
            out.updates += 1;
            let v = record(&mut rng);
            kv.update(&key(pick), &v).map_err(|e| e.to_string())?;
        } else {
            out.inserts += 1;
            let v = record(&mut rng);
            kv.insert(&key(count), &v).map_err(|e| e.to_string())?;
            count += 1;
        }
        out.latencies.push(t.elapsed());
    }
    out.elapsed = t0.elapsed();
    Ok(out)
}

/// In-memory store, for tests.
#[derive(Debug, Default)]
pub struct MemKv(pub HashMap<String, Value>);

impl Kv for MemKv {
    type Error = std::convert::Infallible;
    fn read(&mut self, key: &str) -> Result<bool, Self::Error> {
        Ok(self.0.contains_key(key))
    }
    fn update(&mut self, key: &str, v: &Value) -> Result<(), Self::Error> {
        self.0.insert(key.to_string(), v.clone());
        Ok(())
    }
    fn insert(&mut self, key: &str, v: &Value) -> Result<(), Self::Error> {
        self.0.insert(key.to_string(), v.clone());
        Ok(())
    }
}

impl Kv for crate::cooldb::CoolDb {
    type Error = crate::cooldb::CoolDbError;
    fn read(&mut self, key: &str) -> Result<bool, Self::Error> {
        match self.get(key) {
            Ok(_) => Ok(true),
            Err(crate::cooldb::CoolDbError::Missing(_)) => Ok(false),
            Err(e) => Err(e),
        }
    }
    fn update(&mut self, key: &str, v: &Value) -> Result<(), Self::Error> {
        self.put(key, v)
    }
    fn insert(&mut self, key: &str, v: &Value) -> Result<(), Self::Error> {
        self.put(key, v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixes_and_no_misses() {
        for w in Workload::ALL {
            let mut kv = MemKv::default();
            load(&mut kv, 500, 1).unwrap();
            let o = run(&mut kv, w, 500, 4000, 2).unwrap();
            assert_eq!(o.misses, 0, "{w:?}");
            assert_eq!(o.reads + o.updates + o.inserts, 4000);
            let (r, u, i) = w.mix();
            let f = |x: u64| x as f64 / 4000.0;
            assert!((f(o.reads) - r).abs() < 0.05, "{w:?}");
            assert!((f(o.updates) - u).abs() < 0.05, "{w:?}");
            assert!((f(o.inserts) - i).abs() < 0.05, "{w:?}");
            assert_eq!(kv.0.len() as u64, 500 + o.inserts);
        }
    }

    #[test]
    fn zipf_is_skewed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Zipf::new(1000, ZIPF_CONSTANT).unwrap();
        let top = (0..10_000).filter(|_| z.sample(&mut rng) <= 10.0).count();
        // The 10 hottest of 1000 keys draw far more than 1% of accesses.
        assert!(top > 2000, "{top}");
    }
}
