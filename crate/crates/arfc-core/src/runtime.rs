//! Kernel parallelism control.
//!
//! Heavy kernels split work over disjoint output slabs with `par_for`. Every
//! slab computes its own outputs with a fixed inner loop order, so results are
//! bitwise identical for any worker count — parallelism never changes the
//! order of floating-point accumulation, only which thread runs a slab.
//!
//! The `ARFC_THREADS` environment variable caps the worker count. It is read
//! once, the first time a kernel runs (or when `configure_from_env` is called
//! explicitly, e.g. by the CLI at startup).

use std::sync::OnceLock;

use rayon::prelude::*;

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

fn pool() -> &'static Option<rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let requested = std::env::var("ARFC_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1);
        let threads = requested.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
        if threads <= 1 {
            None
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .ok()
        }
    })
}

/// Read `ARFC_THREADS` and build the worker pool now. Idempotent.
pub fn configure_from_env() {
    let _ = pool();
}

/// Number of kernel workers currently in effect.
pub fn worker_count() -> usize {
    match pool() {
        Some(p) => p.current_num_threads(),
        None => 1,
    }
}

/// Run `f(i)` for `i` in `0..count`. Iterations must write to disjoint data.
/// Falls back to a plain serial loop when only one worker is configured, so
/// single-core runs pay no scheduling overhead.
pub fn par_for<F>(count: usize, f: F)
where
    F: Fn(usize) + Send + Sync,
{
    match pool() {
        Some(p) if count > 1 => p.install(|| (0..count).into_par_iter().for_each(|i| f(i))),
        _ => {
            for i in 0..count {
                f(i);
            }
        }
    }
}

/// Split `data` into `count` equal chunks and run `f(i, chunk_i)` for each.
/// Chunks are disjoint by construction. `data.len()` must be divisible by
/// `count`.
pub fn par_chunks<T, F>(data: &mut [T], count: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    assert_eq!(data.len() % count.max(1), 0, "uneven chunking");
    if count == 0 {
        return;
    }
    let chunk = data.len() / count;
    match pool() {
        Some(p) if count > 1 => p.install(|| {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, slab)| f(i, slab))
        }),
        _ => {
            for (i, slab) in data.chunks_mut(chunk).enumerate() {
                f(i, slab);
            }
        }
    }
}
