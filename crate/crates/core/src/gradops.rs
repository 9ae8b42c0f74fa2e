//! Process-wide counter of backward-pass invocations.
//!
//! Zero-shot stylization is forward-only; the CLI asserts that rendering a
//! style never triggers a gradient computation by snapshotting this counter.

use std::sync::atomic::{AtomicU64, Ordering};

static GRAD_OPS: AtomicU64 = AtomicU64::new(0);

/// Number of backward passes executed since process start.
pub fn grad_ops() -> u64 {
    GRAD_OPS.load(Ordering::Relaxed)
}

/// Called once by every backward entry point.
pub(crate) fn record_grad_op() {
    GRAD_OPS.fetch_add(1, Ordering::Relaxed);
}
