//! Data-parallel map with a sequential fallback.
//!
//! Results come back in input order regardless of the worker count, so a
//! parallel run is row-for-row identical to a sequential one.

/// Applies `f` to every item. `workers == 1` always runs on the caller's
/// thread; `workers == 0` uses the global pool size.
pub fn map<T, R, F>(workers: usize, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    if workers == 1 || items.len() < 2 {
        return items.into_iter().map(f).collect();
    }
    parallel_map(workers, items, f)
}

#[cfg(feature = "parallel")]
fn parallel_map<T, R, F>(workers: usize, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let run = || items.into_par_iter().map(&f).collect();
    if workers == 0 {
        return run();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    }
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T, R, F>(_workers: usize, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// Whether this build can run `map` on more than one thread.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
