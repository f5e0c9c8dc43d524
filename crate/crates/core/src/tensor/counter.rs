//! Thread-local arithmetic operation counter.
//!
//! Matmuls add `batch·m·k·n` multiply-adds; elementwise ops and reductions add
//! one per element touched. Counts are exact and independent of timing noise.

use std::cell::Cell;

thread_local! {
    static OPS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: usize) {
    OPS.with(|c| c.set(c.get().wrapping_add(n as u64)));
}

pub fn reset() {
    OPS.with(|c| c.set(0));
}

pub fn get() -> u64 {
    OPS.with(|c| c.get())
}

/// Runs `f` and returns its result along with the operations it performed.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = get();
    let out = f();
    (out, get().wrapping_sub(before))
}
