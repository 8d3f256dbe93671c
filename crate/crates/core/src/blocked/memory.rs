//! Accounting for the engine's transient buffers.

use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Memory and tiling counters reported by the blocked engine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemoryStats {
    /// High-water mark of all transient buffers, excluding inputs and outputs.
    pub peak_auxiliary_bytes: usize,
    pub tiles_processed: usize,
    pub tiles_skipped_by_filter: usize,
}

impl MemoryStats {
    pub(crate) fn merge(self, other: MemoryStats) -> MemoryStats {
        MemoryStats {
            peak_auxiliary_bytes: self.peak_auxiliary_bytes.max(other.peak_auxiliary_bytes),
            tiles_processed: self.tiles_processed + other.tiles_processed,
            tiles_skipped_by_filter: self.tiles_skipped_by_filter + other.tiles_skipped_by_filter,
        }
    }
}

/// Tracks live scratch bytes across threads. Every engine allocation goes
/// through [`Ledger::zeros`]; a single buffer may not exceed `limit` bytes.
pub(crate) struct Ledger {
    live: AtomicUsize,
    peak: AtomicUsize,
    limit: usize,
}

impl Ledger {
    pub fn new(limit: usize) -> Self {
        Self {
            live: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
            limit,
        }
    }

    pub fn zeros<T: Default + Clone>(&self, len: usize) -> Scratch<'_, T> {
        let bytes = len * std::mem::size_of::<T>();
        assert!(
            bytes <= self.limit,
            "scratch buffer of {bytes} bytes exceeds the plan limit of {} bytes",
            self.limit
        );
        let live = self.live.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.peak.fetch_max(live, Ordering::Relaxed);
        Scratch {
            data: vec![T::default(); len],
            bytes,
            ledger: self,
        }
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }
}

pub(crate) struct Scratch<'a, T> {
    data: Vec<T>,
    bytes: usize,
    ledger: &'a Ledger,
}

impl<T> Deref for Scratch<'_, T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for Scratch<'_, T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

impl<T> Drop for Scratch<'_, T> {
    fn drop(&mut self) {
        self.ledger.live.fetch_sub(self.bytes, Ordering::Relaxed);
    }
}
