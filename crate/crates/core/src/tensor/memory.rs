//! Per-thread accounting of live tensor storage.
//!
//! Every [`Tensor`](super::Tensor) allocation and drop is tallied here, which
//! gives an allocation-level measure of activation memory without relying on
//! the global allocator. Counters are thread-local so concurrent test threads
//! do not see each other's tensors.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

const ELEM_BYTES: usize = std::mem::size_of::<f64>();

pub(crate) fn track_alloc(elems: usize) {
    LIVE.with(|live| {
        let now = live.get() + elems * ELEM_BYTES;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now);
            }
        });
    });
}

pub(crate) fn track_free(elems: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(elems * ELEM_BYTES)));
}

/// Bytes of tensor storage currently alive on this thread.
pub fn live_bytes() -> usize {
    LIVE.with(Cell::get)
}

/// Highest value of [`live_bytes`] since the last [`reset_peak`].
pub fn peak_bytes() -> usize {
    PEAK.with(Cell::get)
}

/// Restarts peak tracking from the current live level.
pub fn reset_peak() {
    let now = live_bytes();
    PEAK.with(|peak| peak.set(now));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn tracks_allocations_and_drops() {
        let base = live_bytes();
        reset_peak();
        {
            let a = Tensor::zeros(&[10]);
            let b = a.clone();
            assert_eq!(live_bytes(), base + 160);
            drop(b);
            assert_eq!(live_bytes(), base + 80);
            let v = a.into_vec();
            assert_eq!(v.len(), 10);
            assert_eq!(live_bytes(), base);
        }
        assert_eq!(peak_bytes(), base + 160);
    }
}
