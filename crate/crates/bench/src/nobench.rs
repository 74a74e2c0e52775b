//! Seeded NoBench-like JSON documents.
//!
//! Each document has a fixed core (`str1`, `str2`, `num`, `bool`,
//! `thousandth`), two dynamically typed fields, a nested object, a nested
//! array, and ten sparse fields drawn from a pool of 1000.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

const WORDS: &[&str] = &[
    "amber", "basalt", "cobalt", "delta", "ember", "fjord", "granite", "harbor", "indigo", "juniper", "krypton",
    "lagoon", "meadow", "nickel", "onyx", "prairie", "quartz", "rubble", "sierra", "tundra", "umber", "violet",
    "willow", "xenon", "yarrow", "zephyr",
];

pub const SPARSE_POOL: usize = 1000;
pub const SPARSE_PER_DOC: usize = 10;

pub struct Generator {
    rng: ChaCha8Rng,
    next: u64,
    total: u64,
}

fn word(rng: &mut ChaCha8Rng) -> &'static str {
    WORDS.choose(rng).unwrap()
}

fn phrase(rng: &mut ChaCha8Rng, n: usize) -> String {
    (0..n).map(|_| word(rng)).collect::<Vec<_>>().join(" ")
}

impl Generator {
    /// Generator for a collection of `total` documents.
    pub fn new(seed: u64, total: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            next: 0,
            total: total.max(1),
        }
    }

    pub fn key(i: u64) -> String {
        format!("doc{i:08}")
    }

    pub fn next_doc(&mut self) -> (String, Value) {
        let i = self.next;
        self.next += 1;
        let rng = &mut self.rng;
        let num = rng.gen_range(0..self.total as i64);
        let dyn1: Value = if rng.gen_bool(0.5) { json!(rng.gen_range(0..self.total as i64)) } else { json!(phrase(rng, 1)) };
        let dyn2: Value = match rng.gen_range(0..3) {
            0 => json!(rng.gen_bool(0.5)),
            1 => json!(rng.gen_range(-1000.0..1000.0f64)),
            _ => json!(phrase(rng, 2)),
        };
        let nested_arr: Vec<Value> = (0..rng.gen_range(0..6)).map(|_| json!(word(rng))).collect();
        let mut d = Map::new();
        d.insert("str1".into(), json!(format!("{}-{i}", word(rng))));
        d.insert("str2".into(), json!(phrase(rng, 3)));
        d.insert("num".into(), json!(num));
        d.insert("bool".into(), json!(rng.gen_bool(0.5)));
        d.insert("dyn1".into(), dyn1);
        d.insert("dyn2".into(), dyn2);
        d.insert(
            "nested_obj".into(),
            json!({ "str": phrase(rng, 2), "num": rng.gen_range(0..self.total as i64) }),
        );
        d.insert("nested_arr".into(), Value::Array(nested_arr));
        let base = rng.gen_range(0..SPARSE_POOL / SPARSE_PER_DOC) * SPARSE_PER_DOC;
        for s in base..base + SPARSE_PER_DOC {
            d.insert(format!("sparse_{s:03}"), json!(phrase(rng, 1)));
        }
        d.insert("thousandth".into(), json!(num % 1000));
        (Self::key(i), Value::Object(d))
    }
}

impl Iterator for Generator {
    type Item = (String, Value);
    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_doc())
    }
}

/// A random range query over one of the numeric fields.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeQuery {
    pub path: &'static str,
    pub lo: f64,
    pub hi: f64,
}

/// Seeded range queries with selectivity around 0.1%.
pub fn queries(seed: u64, total: u64, n: usize) -> Vec<RangeQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9);
    let total = total.max(1) as f64;
    let width = (total / 1000.0).max(1.0);
    (0..n)
        .map(|_| {
            let path = ["num", "nested_obj.num", "thousandth"][rng.gen_range(0..3)];
            let top = if path == "thousandth" { 1000.0 } else { total };
            let w = if path == "thousandth" { 0.0 } else { width };
            let lo = rng.gen_range(0.0..top).floor();
            RangeQuery { path, lo, hi: lo + w }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_shaped() {
        let a: Vec<_> = Generator::new(7, 100).take(20).collect();
        let b: Vec<_> = Generator::new(7, 100).take(20).collect();
        assert_eq!(a, b);
        let (k, d) = &a[3];
        assert_eq!(k, "doc00000003");
        let n = d["num"].as_i64().unwrap();
        assert!((0..100).contains(&n));
        assert_eq!(d["thousandth"].as_i64().unwrap(), n % 1000);
        let sparse = d.as_object().unwrap().keys().filter(|k| k.starts_with("sparse_")).count();
        assert_eq!(sparse, SPARSE_PER_DOC);
    }

    #[test]
    fn query_bounds() {
        for q in queries(1, 10_000, 200) {
            assert!(q.lo <= q.hi);
        }
    }
}
