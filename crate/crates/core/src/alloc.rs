//! A counting global allocator for memory measurements.
//!
//! Install it in a binary or test target:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: lsce::alloc::CountingAllocator = lsce::alloc::CountingAllocator::system();
//! ```
//!
//! Counters are thread-local, so [`measure`] sees only allocations made on
//! the calling thread. Run engines in deterministic (serial) mode when using it.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

static INSTALLED: AtomicBool = AtomicBool::new(false);

struct Counters {
    tracking: Cell<bool>,
    live: Cell<i64>,
    peak: Cell<i64>,
    largest: Cell<usize>,
    count: Cell<usize>,
}

thread_local! {
    static COUNTERS: Counters = const {
        Counters {
            tracking: Cell::new(false),
            live: Cell::new(0),
            peak: Cell::new(0),
            largest: Cell::new(0),
            count: Cell::new(0),
        }
    };
}

fn record(delta: i64, size: usize) {
    let _ = COUNTERS.try_with(|c| {
        if !c.tracking.get() {
            return;
        }
        let live = c.live.get() + delta;
        c.live.set(live);
        if live > c.peak.get() {
            c.peak.set(live);
        }
        if delta > 0 {
            c.count.set(c.count.get() + 1);
            if size > c.largest.get() {
                c.largest.set(size);
            }
        }
    });
}

pub struct CountingAllocator<A = System> {
    inner: A,
}

impl CountingAllocator<System> {
    pub const fn system() -> Self {
        Self { inner: System }
    }
}

impl<A> CountingAllocator<A> {
    pub const fn new(inner: A) -> Self {
        Self { inner }
    }
}

unsafe impl<A: GlobalAlloc> GlobalAlloc for CountingAllocator<A> {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = unsafe { self.inner.alloc(layout) };
        if !p.is_null() {
            record(layout.size() as i64, layout.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        INSTALLED.store(true, Ordering::Relaxed);
        let p = unsafe { self.inner.alloc_zeroed(layout) };
        if !p.is_null() {
            record(layout.size() as i64, layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { self.inner.dealloc(ptr, layout) };
        record(-(layout.size() as i64), 0);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { self.inner.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            record(-(layout.size() as i64), 0);
            record(new_size as i64, new_size);
        }
        p
    }
}

/// Allocation statistics for one [`measure`] call, relative to its start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AllocStats {
    /// Highest live byte count above the starting point.
    pub peak_bytes: usize,
    /// Live bytes still held when the closure returned (its outputs).
    pub retained_bytes: i64,
    pub largest_allocation: usize,
    pub allocations: usize,
}

impl AllocStats {
    /// Peak minus what the closure handed back: transient memory only.
    pub fn auxiliary_bytes(&self) -> usize {
        (self.peak_bytes as i64 - self.retained_bytes.max(0)).max(0) as usize
    }
}

/// True once a [`CountingAllocator`] has served an allocation in this process.
pub fn is_installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

/// Runs `f` and reports the calling thread's allocations during it. Not
/// reentrant; all zeros unless the counting allocator is installed.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, AllocStats) {
    COUNTERS.with(|c| {
        c.live.set(0);
        c.peak.set(0);
        c.largest.set(0);
        c.count.set(0);
        c.tracking.set(true);
    });
    let out = f();
    let stats = COUNTERS.with(|c| {
        c.tracking.set(false);
        AllocStats {
            peak_bytes: c.peak.get().max(0) as usize,
            retained_bytes: c.live.get(),
            largest_allocation: c.largest.get(),
            allocations: c.count.get(),
        }
    });
    (out, stats)
}
