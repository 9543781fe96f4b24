//! Execution of independent indexed work items, sequential or thread-parallel.
//!
//! All parallel loops in the crate route through [`map_indexed`]. Work items
//! take only their index, derive any randomness from it (see [`crate::seed`]),
//! and results are collected in index order, so output is identical for every
//! thread count. Building without the `parallel` feature removes the rayon
//! dependency and leaves the sequential path.

/// Thread-count request: 0 means "use all available cores", 1 forces the
/// sequential path, anything else asks for exactly that many workers.
pub type Threads = usize;

/// Runs `f` for indices `0..n` sequentially, collecting results in order.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Runs `f` for indices `0..n` on a rayon pool with the requested number of
/// threads, collecting results in index order.
#[cfg(feature = "parallel")]
pub fn map_indexed_par<T, F>(n: usize, threads: Threads, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    use rayon::prelude::*;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build();
    match pool {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(_) => map_indexed_seq(n, f),
    }
}

/// Dispatches to the parallel path when it is compiled in and more than one
/// thread is requested; falls back to the sequential path otherwise.
pub fn map_indexed<T, F>(n: usize, threads: Threads, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if threads != 1 {
            return map_indexed_par(n, threads, f);
        }
    }
    let _ = threads;
    map_indexed_seq(n, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_preserves_index_order() {
        let out = map_indexed_seq(5, |i| i * i);
        assert_eq!(out, vec![0, 1, 4, 9, 16]);
    }

    #[test]
    fn dispatch_matches_sequential_for_every_thread_count() {
        let expected: Vec<u64> = map_indexed_seq(64, |i| crate::seed::derive_seed(9, "t", &[i as u64]));
        for threads in [0, 1, 2, 3, 8] {
            let got = map_indexed(64, threads, |i| crate::seed::derive_seed(9, "t", &[i as u64]));
            assert_eq!(got, expected, "threads={threads}");
        }
    }
}
