//! Data-parallel fan-out with a sequential fallback.
//!
//! All per-item work in this crate (per-example gradients, per-query
//! candidate sets, per-record metrics) goes through [`map_indexed`], which
//! dispatches to rayon when the `parallel` feature is enabled and to a plain
//! loop otherwise. Results come back in index order either way, and every
//! item derives its own seed, so outputs are identical regardless of worker
//! count or feature selection.

/// Sequential reference path. Always available; benchmarks compare it
/// against the rayon path.
pub fn map_indexed_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U + Sync + Send,
    U: Send,
{
    (0..n).map(f).collect()
}

/// Rayon path. Order-preserving collect keeps results positionally stable.
#[cfg(feature = "parallel")]
pub fn map_indexed_par<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U + Sync + Send,
    U: Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Fan `f` out over `0..n`, collecting results in index order.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U + Sync + Send,
    U: Send,
{
    #[cfg(feature = "parallel")]
    {
        map_indexed_par(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(n, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_index_order() {
        let out = map_indexed(1000, |i| i * 3);
        assert_eq!(out, (0..1000).map(|i| i * 3).collect::<Vec<_>>());
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn par_matches_seq() {
        let f = |i: usize| (i as f64).sqrt().sin();
        let seq = map_indexed_seq(517, f);
        let par = map_indexed_par(517, f);
        assert_eq!(seq, par);
    }
}
