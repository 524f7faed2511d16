//! Lightweight global instrumentation counters.
//!
//! These never influence results; they exist so tests can assert performance
//! and purity properties (e.g. that training with alpha = 1 touches no
//! target-domain features at all).

use std::sync::atomic::{AtomicU64, Ordering};

static TARGET_FEATURE_EVALS: AtomicU64 = AtomicU64::new(0);
static SPLIT_EVALS: AtomicU64 = AtomicU64::new(0);

/// Record `n` feature-channel evaluations performed on target-domain images
/// during training.
pub fn add_target_feature_evals(n: u64) {
    if n > 0 {
        TARGET_FEATURE_EVALS.fetch_add(n, Ordering::Relaxed);
    }
}

pub fn target_feature_evals() -> u64 {
    TARGET_FEATURE_EVALS.load(Ordering::Relaxed)
}

/// Record `n` split-node evaluations during forest posterior lookups.
pub fn add_split_evals(n: u64) {
    if n > 0 {
        SPLIT_EVALS.fetch_add(n, Ordering::Relaxed);
    }
}

pub fn split_evals() -> u64 {
    SPLIT_EVALS.load(Ordering::Relaxed)
}

pub fn reset() {
    TARGET_FEATURE_EVALS.store(0, Ordering::Relaxed);
    SPLIT_EVALS.store(0, Ordering::Relaxed);
}

/// Serializes unit tests that reset, increment, or assert on the global
/// counters; without it, concurrently running tests corrupt each other's
/// deltas.
#[cfg(test)]
pub fn test_guard() -> std::sync::MutexGuard<'static, ()> {
    static LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}
