//! Data-parallel helpers with a sequential fallback.
//!
//! With the default `parallel` feature, inner loops fan out over rayon.
//! Without it, the same helpers degrade to plain sequential iteration.
//! Every helper preserves a fixed per-element reduction order, so results
//! are bitwise identical regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to equal-size disjoint chunks of `data`, indexed by chunk number.
pub fn for_each_chunk_mut<S: Send, F>(data: &mut [S], chunk: usize, f: F)
where
    F: Fn(usize, &mut [S]) + Sync + Send,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Map indices `0..n` to values; output order matches index order.
pub fn map_indexed<T: Send, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Run `f` pinned to a single worker unless `parallel` is requested.
///
/// Used by latency benchmarking so fused-vs-multi-branch ratios reflect
/// arithmetic rather than parallel efficiency.
pub fn with_inference_threads<T: Send>(parallel: bool, f: impl FnOnce() -> T + Send) -> T {
    #[cfg(feature = "parallel")]
    {
        if parallel {
            f()
        } else {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(1)
                .build()
                .expect("single-thread pool");
            pool.install(f)
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = parallel;
        f()
    }
}
