//! Per-thread multiply-accumulate counter.
//!
//! Matrix products, convolutions and rotary encodings add their forward MAC
//! count here. Backward passes are not counted.

use std::cell::Cell;

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn add(n: u64) {
    MACS.with(|c| c.set(c.get().wrapping_add(n)));
}

pub fn reset() {
    MACS.with(|c| c.set(0));
}

pub fn read() -> u64 {
    MACS.with(Cell::get)
}

/// Runs `f` and returns its result together with the MACs it performed on this thread.
pub fn measure<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let before = read();
    let out = f();
    (out, read().wrapping_sub(before))
}
