//! Worker pool selection.

use rayon::ThreadPoolBuilder;

/// Runs `f` on a dedicated pool of `threads` workers, or on the global pool
/// when `threads` is `None` or zero.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    match threads.filter(|&n| n > 0) {
        Some(n) => ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("failed to build worker pool")
            .install(f),
        None => f(),
    }
}
