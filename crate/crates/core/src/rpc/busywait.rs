//! Adaptive polling: spin while the machine is idle, back off as it gets busy.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::config::BusyWaitConfig;
use crate::runtime::sys;

/// Sleep between two polling passes at CPU load `load` (0 to 1).
pub fn next_sleep(cfg: &BusyWaitConfig, load: f64) -> Duration {
    if load < cfg.low_load {
        cfg.sleep_low
    } else if load <= cfg.high_load {
        cfg.sleep_mid
    } else {
        cfg.sleep_high
    }
}

/// Process CPU load over a sliding window, not counting time spent polling.
///
/// Without the correction a spinning poller would see its own spinning as
/// load and throttle itself.
pub struct LoadMonitor {
    window: Duration,
    cpus: f64,
    spin_ns: AtomicU64,
    state: Mutex<Sample>,
    load_bits: AtomicU64,
}

struct Sample {
    at: Instant,
    cpu: Duration,
    spin_ns: u64,
}

impl LoadMonitor {
    pub fn new(window: Duration) -> Arc<Self> {
        Arc::new(Self {
            window,
            cpus: sys::online_cpus() as f64,
            spin_ns: AtomicU64::new(0),
            state: Mutex::new(Sample {
                at: Instant::now(),
                cpu: sys::process_cpu_time(),
                spin_ns: 0,
            }),
            load_bits: AtomicU64::new(0f64.to_bits()),
        })
    }

    /// Shared monitor for the process.
    pub fn global() -> Arc<Self> {
        static G: std::sync::OnceLock<Arc<LoadMonitor>> = std::sync::OnceLock::new();
        G.get_or_init(|| Self::new(BusyWaitConfig::default().window)).clone()
    }

    pub fn add_spin(&self, d: Duration) {
        self.spin_ns.fetch_add(d.as_nanos() as u64, Ordering::Relaxed);
    }

    /// Current estimate, refreshed at most once per window.
    pub fn load(&self) -> f64 {
        if let Ok(mut s) = self.state.try_lock() {
            let now = Instant::now();
            let wall = now - s.at;
            if wall >= self.window {
                let cpu = sys::process_cpu_time();
                let spin = self.spin_ns.load(Ordering::Relaxed);
                let busy = (cpu - s.cpu).as_nanos() as f64 - spin.saturating_sub(s.spin_ns) as f64;
                let load = (busy / (wall.as_nanos() as f64 * self.cpus)).clamp(0.0, 1.0);
                self.load_bits.store(load.to_bits(), Ordering::Relaxed);
                *s = Sample { at: now, cpu, spin_ns: spin };
            }
        }
        f64::from_bits(self.load_bits.load(Ordering::Relaxed))
    }
}

/// Per-thread polling state.
pub struct BusyWait {
    cfg: BusyWaitConfig,
    monitor: Arc<LoadMonitor>,
    idle_since: Option<Instant>,
    slept: Duration,
    passes: u32,
    yield_only: bool,
}

const SPIN_PASSES: u32 = 64;

impl BusyWait {
    pub fn new(cfg: BusyWaitConfig, monitor: Arc<LoadMonitor>) -> Self {
        sys::set_timer_slack(1_000);
        Self {
            cfg,
            monitor,
            idle_since: None,
            slept: Duration::ZERO,
            passes: 0,
            yield_only: sys::online_cpus() == 1,
        }
    }

    /// Called after a pass that found work.
    pub fn reset(&mut self) {
        if let Some(t) = self.idle_since.take() {
            self.monitor.add_spin(t.elapsed().saturating_sub(self.slept));
        }
        self.slept = Duration::ZERO;
        self.passes = 0;
    }

    /// Called after a pass that found nothing.
    pub fn idle(&mut self) {
        if self.idle_since.is_none() {
            self.idle_since = Some(Instant::now());
        }
        self.passes = self.passes.saturating_add(1);
        if self.passes < SPIN_PASSES {
            // With one CPU the peer can only make progress if we step aside.
            if self.yield_only {
                std::thread::yield_now();
            } else {
                std::hint::spin_loop();
            }
            return;
        }
        let d = next_sleep(&self.cfg, self.monitor.load());
        if d.is_zero() {
            std::thread::yield_now();
        } else {
            let t = Instant::now();
            std::thread::sleep(d);
            self.slept += t.elapsed();
        }
    }
}

impl Drop for BusyWait {
    fn drop(&mut self) {
        self.reset();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_function_points() {
        let cfg = BusyWaitConfig::default();
        assert_eq!(next_sleep(&cfg, 0.20), Duration::ZERO);
        assert_eq!(next_sleep(&cfg, 0.40), Duration::from_micros(5));
        assert_eq!(next_sleep(&cfg, 0.75), Duration::from_micros(150));
    }

    #[test]
    fn boundaries() {
        let cfg = BusyWaitConfig::default();
        assert_eq!(next_sleep(&cfg, 0.0), Duration::ZERO);
        assert_eq!(next_sleep(&cfg, 0.25), Duration::from_micros(5));
        assert_eq!(next_sleep(&cfg, 0.50), Duration::from_micros(5));
        assert_eq!(next_sleep(&cfg, 0.5001), Duration::from_micros(150));
        assert_eq!(next_sleep(&cfg, 1.0), Duration::from_micros(150));
    }

    #[test]
    fn spinning_is_not_load() {
        let m = LoadMonitor::new(Duration::from_millis(20));
        let mut bw = BusyWait::new(BusyWaitConfig::default(), m.clone());
        let t = Instant::now();
        while t.elapsed() < Duration::from_millis(60) {
            bw.idle();
            if bw.passes > 8 {
                bw.reset();
            }
        }
        assert!(m.load() < 0.5, "load {}", m.load());
    }
}
