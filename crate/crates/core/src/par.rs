//! Chunked data-parallel helpers.
//!
//! Work is always split into fixed-size chunks of paths and partial results are
//! combined in chunk order, so reductions are bit-identical whether the
//! `parallel` feature is on or off and whatever the thread count.

use std::ops::Range;

/// Paths per work unit.
pub const CHUNK: usize = 512;

fn chunk_ranges(n: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(CHUNK))
        .map(|c| c * CHUNK..((c + 1) * CHUNK).min(n))
        .collect()
}

/// Applies `f` to each chunk of `0..n` and returns the results in chunk order.
pub fn map_chunks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let ranges = chunk_ranges(n);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        ranges.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ranges.into_iter().map(f).collect()
    }
}

/// Maps every index of `0..n` to an item, preserving order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_chunks(n, |r| r.map(&f).collect::<Vec<_>>())
        .into_iter()
        .flatten()
        .collect()
}

/// Fills `out` in place, `stride` items per index.
pub fn fill_strided<T, F>(out: &mut [T], stride: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(stride > 0 && out.len() % stride == 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(stride * CHUNK)
            .enumerate()
            .for_each(|(c, block)| {
                for (k, row) in block.chunks_mut(stride).enumerate() {
                    f(c * CHUNK + k, row);
                }
            });
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, row) in out.chunks_mut(stride).enumerate() {
            f(i, row);
        }
    }
}

/// Sum of per-index vectors of length `len`, combined deterministically.
pub fn sum_vectors<F>(n: usize, len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let partials = map_chunks(n, |r| {
        let mut acc = vec![0.0; len];
        for i in r {
            f(i, &mut acc);
        }
        acc
    });
    let mut total = vec![0.0; len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Runs `f` on a dedicated pool with `threads` workers; 0 uses the global pool.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        if threads == 0 {
            return f();
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("failed to build thread pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
