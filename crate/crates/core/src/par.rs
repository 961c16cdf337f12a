//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool.
//! Every helper returns results in input order and every reduction in the
//! crate folds chunk results sequentially in that order, so outputs are
//! bitwise identical with and without the feature and for any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Samples per work unit for gradient accumulation. Fixed so the floating
/// point summation tree does not depend on the thread count.
pub const CHUNK: usize = 16;

/// Map `f` over `0..len`, preserving order.
pub fn map_range<T, F>(len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..len).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..len).map(f).collect()
    }
}

/// Map `f` over slice items, preserving order.
pub fn map_slice<I, T, F>(items: &[I], f: F) -> Vec<T>
where
    I: Sync,
    T: Send,
    F: Fn(&I) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Map `f` over consecutive `[start, end)` ranges of width `chunk`.
pub fn map_chunks<T, F>(len: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, usize) -> T + Sync + Send,
{
    let chunk = chunk.max(1);
    let n_chunks = len.div_ceil(chunk);
    map_range(n_chunks, |c| {
        let start = c * chunk;
        f(start, (start + chunk).min(len))
    })
}

/// Map with per-worker scratch state created by `init`.
pub fn map_range_init<S, T, I, F>(len: usize, init: I, f: F) -> Vec<T>
where
    T: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..len).into_par_iter().map_init(init, f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut state = init();
        (0..len).map(|i| f(&mut state, i)).collect()
    }
}

/// Whether this build runs on the rayon pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range_in_order() {
        let spans = map_chunks(37, 16, |s, e| (s, e));
        assert_eq!(spans, vec![(0, 16), (16, 32), (32, 37)]);
        assert!(map_chunks(0, 16, |s, e| (s, e)).is_empty());
    }

    #[test]
    fn map_preserves_order() {
        let v = map_range(100, |i| i * 2);
        assert_eq!(v, (0..100).map(|i| i * 2).collect::<Vec<_>>());
        let w = map_range_init(10, || 1usize, |s, i| *s + i);
        assert_eq!(w, (1..11).collect::<Vec<_>>());
    }
}
