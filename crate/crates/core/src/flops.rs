//! Runtime FLOP instrumentation.
//!
//! Every kernel in [`crate::tensor`] charges the operations it performs to a
//! thread-local counter. [`measure`] brackets a closure and returns what it
//! charged. This is the instrumented oracle the closed-form model in
//! [`crate::analysis`] is reconciled against.
//!
//! Convention: a multiply-accumulate is 2 FLOPs; `exp`, `sqrt`, `tanh` and
//! divisions are 1 FLOP each.

use std::cell::Cell;

thread_local! {
    static COUNTER: Cell<u64> = const { Cell::new(0) };
}

#[inline]
pub(crate) fn charge(n: u64) {
    COUNTER.with(|c| c.set(c.get() + n));
}

/// FLOPs charged on this thread since it started.
pub fn current() -> u64 {
    COUNTER.with(|c| c.get())
}

/// Runs `f` and returns its result with the FLOPs it charged on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let before = current();
    let out = f();
    (out, current() - before)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_measure() {
        let (inner, outer) = measure(|| {
            charge(3);
            let ((), n) = measure(|| charge(5));
            n
        });
        assert_eq!(inner, 5);
        assert_eq!(outer, 8);
    }
}
