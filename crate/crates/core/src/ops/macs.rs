//! Instrumented multiply-accumulate tallying.
//!
//! When a tally is active on the current thread, every forward kernel reports
//! the composite multiply-accumulate operations it actually executed, derived
//! from its own loop bounds. This is the measured counterpart to the analytic
//! walk in [`crate::complexity`]; the two are compared for exact equality in
//! tests.
//!
//! Kernels run sequentially on the calling thread while a tally is active so
//! that the count is confined to the scoped work.

use std::cell::Cell;

thread_local! {
    static TALLY: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Whether a MAC tally is active on this thread.
#[inline]
pub fn is_active() -> bool {
    TALLY.with(|t| t.get().is_some())
}

#[inline]
pub(crate) fn add(n: u64) {
    TALLY.with(|t| {
        if let Some(cur) = t.get() {
            t.set(Some(cur + n));
        }
    });
}

/// Run `f` with MAC counting enabled and return its result plus the tally.
pub fn tally<R>(f: impl FnOnce() -> R) -> (R, u64) {
    TALLY.with(|t| {
        assert!(t.get().is_none(), "mac tally scopes do not nest");
        t.set(Some(0));
    });
    let out = f();
    let count = TALLY.with(|t| {
        let c = t.get().expect("tally still active");
        t.set(None);
        c
    });
    (out, count)
}
