//! Data-parallel helpers. Batch evaluation, seed-batch reduction and plan
//! sweeps fan out through these; with the `parallel` feature disabled they
//! degrade to plain sequential iteration.
//!
//! Every helper preserves input order, so results are bitwise identical
//! whether work runs on one thread or many.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Order-preserving map, parallel when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Order-preserving map over an index range.
#[cfg(feature = "parallel")]
pub fn par_map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Always-sequential map; benchmark baseline and debugging aid.
pub fn seq_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Runs `f` inside a worker pool of the requested size. `None` uses the
/// default pool. With the `parallel` feature off the count is ignored.
#[cfg(feature = "parallel")]
pub fn with_workers<R, F>(workers: Option<usize>, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("worker pool")
            .install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_workers<R, F>(_workers: Option<usize>, f: F) -> R
where
    F: FnOnce() -> R,
{
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        let xs: Vec<u64> = (0..1000).collect();
        let par = par_map(&xs, |&x| x * x);
        let seq = seq_map(&xs, |&x| x * x);
        assert_eq!(par, seq);
    }

    #[test]
    fn worker_pool_result_independent_of_size() {
        let xs: Vec<u64> = (0..512).collect();
        let one = with_workers(Some(1), || par_map(&xs, |&x| x.wrapping_mul(31)));
        let many = with_workers(None, || par_map(&xs, |&x| x.wrapping_mul(31)));
        assert_eq!(one, many);
    }
}
