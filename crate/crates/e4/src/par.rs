//! Data-parallel helpers with a sequential fallback.
//!
//! Replicated runs, Monte Carlo sweeps, and batch evaluations are
//! embarrassingly parallel over independent inputs. With the `parallel`
//! feature (on by default) they fan out over a rayon pool; without it the
//! same entry points run sequentially. `map_collect_seq` is always available
//! so benchmarks can compare both paths directly.

/// Sequential map over an index range.
pub fn map_collect_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    (0..n).map(f).collect()
}

/// Parallel map over an index range (rayon).
#[cfg(feature = "parallel")]
pub fn map_collect_par<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Maps an index range with the best available strategy.
#[cfg(feature = "parallel")]
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    map_collect_par(n, f)
}

/// Maps an index range with the best available strategy.
#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T + Sync + Send,
    T: Send,
{
    map_collect_seq(n, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let a = map_collect(100, |i| i * i);
        let b = map_collect_seq(100, |i| i * i);
        assert_eq!(a, b);
    }
}
