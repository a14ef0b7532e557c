//! Data-parallel fan-out for per-sample work (batch gradients, dataset
//! generation, per-sample evaluation).
//!
//! With the `parallel` feature (default) the fan-out runs on rayon; without it
//! the same entry points fall back to plain sequential loops. Results are
//! collected in index order either way, so outputs are identical bit-for-bit
//! across both modes and any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_range_seq(n, f)
    }
}

/// Sequential reference version of [`map_range`]. Always compiled; the bench
/// suite uses it as the baseline against the parallel path.
pub fn map_range_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Map `f` over a slice, collecting results in order.
pub fn map_slice<'a, T, U, F>(items: &'a [T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&'a T) -> U + Sync + Send,
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

/// Configure the global thread pool size. Call once, before any parallel
/// work; later calls are ignored by rayon. A no-op in sequential builds.
pub fn set_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential_order() {
        let a = map_range(100, |i| i * i);
        let b = map_range_seq(100, |i| i * i);
        assert_eq!(a, b);
    }
}
