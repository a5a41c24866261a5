//! Per-thread tally of multiply-accumulates executed by the dense kernels.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(macs: usize) {
    MACS.with(|c| c.set(c.get() + macs as u64));
}

/// Running total of multiply-accumulates executed on this thread.
pub fn kernel_macs() -> u64 {
    MACS.with(Cell::get)
}

/// Runs `f` and returns its result with the number of multiply-accumulates the
/// GEMM and direct convolution kernels performed on this thread meanwhile.
pub fn count_kernel_macs<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = MACS.with(Cell::get);
    let out = f();
    (out, MACS.with(Cell::get) - before)
}
