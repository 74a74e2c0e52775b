//! Scope pools: equally sized scopes whose seals are released in batches.

use std::collections::VecDeque;
use std::sync::Arc;

use super::{SealError, SealRing, SealToken, STATE_COMPLETED};
use crate::heap::{HeapError, Scope, ScopeState, SharedHeap};

pub struct ScopePool {
    ring: Arc<SealRing>,
    free: VecDeque<Scope>,
    pending: Vec<(Scope, SealToken)>,
    threshold: usize,
    scope_size: u64,
}

impl ScopePool {
    /// Pre-creates `count` scopes of `scope_size` bytes in one run of `heap`.
    pub fn new(
        heap: &SharedHeap,
        ring: Arc<SealRing>,
        count: usize,
        scope_size: u64,
        threshold: usize,
    ) -> Result<Self, HeapError> {
        let scopes = heap.create_scopes(count, scope_size)?;
        Ok(Self {
            ring,
            free: scopes.into(),
            pending: Vec::new(),
            threshold: threshold.max(1),
            scope_size,
        })
    }

    pub fn ring(&self) -> &Arc<SealRing> {
        &self.ring
    }

    pub fn scope_size(&self) -> u64 {
        self.scope_size
    }

    pub fn available(&self) -> usize {
        self.free.len()
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    /// Takes a free scope, flushing completed seals first if none is left.
    pub fn take(&mut self) -> Option<Scope> {
        if self.free.is_empty() && !self.pending.is_empty() {
            self.flush();
        }
        self.free.pop_front()
    }

    /// Returns an unsealed scope.
    pub fn put(&mut self, s: Scope) {
        let _ = s.reset();
        self.free.push_back(s);
    }

    /// Seals a scope taken from this pool.
    pub fn seal(&self, s: &Scope) -> Result<SealToken, SealError> {
        let t = self.ring.seal(s.start(), s.len())?;
        s.set_state(ScopeState::Sealed);
        Ok(t)
    }

    /// Queues a sealed scope for release; flushes once the queue reaches the
    /// threshold. Returns how many were released.
    pub fn retire(&mut self, s: Scope, t: SealToken) -> usize {
        self.pending.push((s, t));
        if self.pending.len() >= self.threshold {
            self.flush()
        } else {
            0
        }
    }

    /// Releases every completed pending seal in one pass and returns their
    /// scopes to the pool. Seals not yet completed stay pending.
    pub fn flush(&mut self) -> usize {
        if self.pending.is_empty() {
            return 0;
        }
        let (ready, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut self.pending)
            .into_iter()
            .partition(|(_, t)| self.ring.state(*t) == Some(STATE_COMPLETED));
        self.pending = waiting;
        let tokens: Vec<SealToken> = ready.iter().map(|(_, t)| *t).collect();
        let results = self.ring.release_batch(&tokens);
        let mut n = 0;
        for ((s, t), r) in ready.into_iter().zip(results) {
            match r {
                Ok(()) => {
                    s.set_state(ScopeState::Active);
                    let _ = s.reset();
                    self.free.push_back(s);
                    n += 1;
                }
                Err(e) => {
                    log::warn!("batch release of seal {}: {e}", t.index);
                    self.pending.push((s, t));
                }
            }
        }
        n
    }
}
