//! Test hook recording the largest score tile allocated on this thread.

use std::cell::Cell;

thread_local! {
    static PEAK: Cell<(usize, usize)> = const { Cell::new((0, 0)) };
}

pub(crate) fn record_tile(rows: usize, cols: usize) {
    PEAK.with(|peak| {
        let (r, c) = peak.get();
        if rows * cols > r * c {
            peak.set((rows, cols));
        }
    });
}

/// Largest `(rows, cols)` score tile seen since the last [`reset`].
pub fn peak_tile() -> (usize, usize) {
    PEAK.with(Cell::get)
}

pub fn reset() {
    PEAK.with(|peak| peak.set((0, 0)));
}
