//! Instrumentation counters.
//!
//! FLOP and masked-row counters are thread-local so concurrent test threads
//! do not see each other's work. Live/peak byte accounting is process-wide
//! and therefore only an estimate when several threads allocate at once.
//!
//! Counted FLOPs: 2 per multiply-add in every matrix product (including the
//! fused multiply-accumulate), 5 per element for softmax, layer norm and
//! cross-entropy, 1 per added element in `index_add`. Element-wise maps,
//! copies, reshapes and reductions are not counted.

use std::cell::Cell;
use std::sync::atomic::{AtomicI64, Ordering};

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
    static FULLY_MASKED_ROWS: Cell<u64> = const { Cell::new(0) };
}

static LIVE_BYTES: AtomicI64 = AtomicI64::new(0);
static PEAK_BYTES: AtomicI64 = AtomicI64::new(0);

pub(crate) fn add_flops(n: u64) {
    FLOPS.with(|c| c.set(c.get() + n));
}

pub fn flops() -> u64 {
    FLOPS.with(Cell::get)
}

pub fn reset_flops() {
    FLOPS.with(|c| c.set(0));
}

pub(crate) fn add_fully_masked_rows(n: u64) {
    FULLY_MASKED_ROWS.with(|c| c.set(c.get() + n));
}

/// Query rows whose keys were all masked (their output is defined as zero).
pub fn fully_masked_rows() -> u64 {
    FULLY_MASKED_ROWS.with(Cell::get)
}

pub fn reset_fully_masked_rows() {
    FULLY_MASKED_ROWS.with(|c| c.set(0));
}

pub(crate) fn acquire_bytes(n: usize) {
    let live = LIVE_BYTES.fetch_add(n as i64, Ordering::Relaxed) + n as i64;
    PEAK_BYTES.fetch_max(live, Ordering::Relaxed);
}

pub(crate) fn release_bytes(n: usize) {
    LIVE_BYTES.fetch_sub(n as i64, Ordering::Relaxed);
}

pub fn live_bytes() -> i64 {
    LIVE_BYTES.load(Ordering::Relaxed)
}

pub fn peak_bytes() -> i64 {
    PEAK_BYTES.load(Ordering::Relaxed)
}

/// Restart peak tracking from the current live total.
pub fn reset_peak_bytes() {
    PEAK_BYTES.store(LIVE_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
}
