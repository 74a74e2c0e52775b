//! Latency samples and their summaries.

use std::time::Instant;

use serde::{Deserialize, Serialize};

/// Summary of a set of latency samples, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub samples: u64,
    pub mean_ns: f64,
    pub p50_ns: f64,
    pub p99_ns: f64,
    pub min_ns: f64,
    pub max_ns: f64,
}

/// Nearest-rank percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[u64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1] as f64
}

impl Summary {
    /// `None` for no samples.
    pub fn of(samples: &[u64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        let sum: u128 = s.iter().map(|&x| x as u128).sum();
        Some(Self {
            samples: s.len() as u64,
            mean_ns: sum as f64 / s.len() as f64,
            p50_ns: percentile(&s, 0.5),
            p99_ns: percentile(&s, 0.99),
            min_ns: s[0] as f64,
            max_ns: s[s.len() - 1] as f64,
        })
    }
}

/// Number of warmup iterations run before `n` measured ones.
pub fn warmup_for(n: usize) -> usize {
    n / 10
}

/// Times `n` calls of `f` after a warmup of `n / 10` discarded calls.
pub fn sample(n: usize, mut f: impl FnMut()) -> Vec<u64> {
    for _ in 0..warmup_for(n) {
        f();
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let t = Instant::now();
        f();
        out.push(t.elapsed().as_nanos() as u64);
    }
    out
}

/// Like [`sample`], but `f` does untimed setup and calls the timer it is
/// given around the part to measure, returning the nanoseconds taken.
pub fn sample_with(n: usize, mut f: impl FnMut() -> u64) -> Vec<u64> {
    for _ in 0..warmup_for(n) {
        f();
    }
    (0..n).map(|_| f()).collect()
}
