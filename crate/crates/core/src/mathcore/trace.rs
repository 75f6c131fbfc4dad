//! Execution trace of floating point work.
//!
//! Every kernel in [`crate::mathcore`] reports the FLOPs it actually executed
//! here. Counting is off unless a caller wraps work in [`measure`], so the
//! hot path only pays for a thread-local flag check.

use std::cell::Cell;

thread_local! {
    static ACTIVE: Cell<bool> = const { Cell::new(false) };
    static COUNT: Cell<u64> = const { Cell::new(0) };
}

/// FLOPs charged per element by a normalization or softmax.
pub const ELEMENTWISE_REDUCTION_FLOPS: u64 = 5;

#[inline]
pub fn record(flops: u64) {
    ACTIVE.with(|a| {
        if a.get() {
            COUNT.with(|c| c.set(c.get() + flops));
        }
    });
}

/// Runs `f` and returns its result together with the FLOPs executed on this
/// thread while it ran. Nested calls are not supported.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let was_active = ACTIVE.with(|a| a.replace(true));
    let before = COUNT.with(|c| c.replace(0));
    let out = f();
    let flops = COUNT.with(|c| c.replace(before));
    ACTIVE.with(|a| a.set(was_active));
    (out, flops)
}

/// Suspends counting for the duration of `f`.
pub fn untraced<R>(f: impl FnOnce() -> R) -> R {
    let was_active = ACTIVE.with(|a| a.replace(false));
    let out = f();
    ACTIVE.with(|a| a.set(was_active));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_only_inside_measure() {
        record(10);
        let ((), n) = measure(|| {
            record(3);
            record(4);
            untraced(|| record(100));
        });
        assert_eq!(n, 7);
    }
}
