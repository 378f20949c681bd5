//! Data-parallel loop helpers.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it (or
//! when the calling thread has switched parallelism off) they run the same
//! closures sequentially. Work is always partitioned by index, never by
//! thread count, so results are bit-identical either way.

use std::cell::Cell;

thread_local! {
    static ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether loops started from this thread may fan out to the rayon pool.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && ENABLED.with(Cell::get)
}

/// Runs `f` with op-level parallelism switched on or off for this thread.
pub fn with_parallelism<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let prev = ENABLED.with(|c| c.replace(enabled));
    let out = f();
    ENABLED.with(|c| c.set(prev));
    out
}

/// Configures the global worker pool. `0` lets rayon pick the thread count.
/// Returns the number of worker threads in effect.
pub fn init_threads(threads: usize) -> usize {
    #[cfg(feature = "parallel")]
    {
        // A second initialization is an error in rayon; the first one wins.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        1
    }
}

pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Calls `f(i, chunk)` for every `chunk`-sized piece of `data`.
pub fn for_each_chunk_mut<F>(data: &mut [f32], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Send + Sync,
{
    if chunk == 0 || data.is_empty() {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() && data.len() > chunk {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk_mut`] over two buffers chunked in lockstep.
pub fn for_each_chunk_pair_mut<A, B, F>(a: &mut [A], ca: usize, b: &mut [B], cb: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Send + Sync,
{
    if ca == 0 || cb == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if parallel_enabled() && a.len() > ca {
        use rayon::prelude::*;
        a.par_chunks_mut(ca)
            .zip(b.par_chunks_mut(cb))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
        return;
    }
    a.chunks_mut(ca)
        .zip(b.chunks_mut(cb))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

/// Evaluates `f` over `0..n` and collects the results in index order.
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
