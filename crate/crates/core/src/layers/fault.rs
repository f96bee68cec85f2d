//! Fault injection for the self-check suite.
//!
//! When enabled on the current thread, [`super::LinearLayer::backward`]
//! returns a weight gradient that is off by 5%. Only `verify` and its tests
//! turn this on.

use std::cell::Cell;

thread_local! {
    static CORRUPT_LINEAR: Cell<bool> = const { Cell::new(false) };
}

pub(crate) fn linear_backward_corrupted() -> bool {
    CORRUPT_LINEAR.with(|c| c.get())
}

/// Runs `f` with a deliberately wrong linear-layer backward pass.
pub fn with_corrupted_linear_backward<T>(f: impl FnOnce() -> T) -> T {
    struct Reset(bool);
    impl Drop for Reset {
        fn drop(&mut self) {
            CORRUPT_LINEAR.with(|c| c.set(self.0));
        }
    }
    let _reset = Reset(CORRUPT_LINEAR.with(|c| c.replace(true)));
    f()
}
