//! Shared rayon pool, sized once from `HDCVC_THREADS` (or the machine).
//!
//! Parallel kernels split work so that each unit owns a disjoint output
//! region and accumulates in a fixed order internally, so results do not
//! depend on the thread count.

use std::sync::OnceLock;

use rayon::{ThreadPool, ThreadPoolBuilder};

static POOL: OnceLock<ThreadPool> = OnceLock::new();

/// The crate-wide compute pool.
pub fn thread_pool() -> &'static ThreadPool {
    POOL.get_or_init(|| {
        let threads = std::env::var("HDCVC_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            });
        ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build thread pool")
    })
}

/// Runs `f(i, chunk_i)` for every `chunk_size` slice of `out`, in parallel.
/// Chunks are disjoint, so this is deterministic for any thread count.
pub(crate) fn par_chunks(out: &mut [f32], chunk_size: usize, f: impl Fn(usize, &mut [f32]) + Sync) {
    use rayon::prelude::*;
    debug_assert_eq!(out.len() % chunk_size, 0);
    if out.len() / chunk_size <= 1 {
        for (i, chunk) in out.chunks_mut(chunk_size).enumerate() {
            f(i, chunk);
        }
        return;
    }
    thread_pool().install(|| {
        out.par_chunks_mut(chunk_size)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    });
}
