//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature the closures run on the rayon pool; without
//! it they run in order on the calling thread. Output order is the input
//! order either way, so results never depend on the feature.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, passing each element's index.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Like [`map_indexed`] for fallible closures; reports the lowest-index error.
pub fn try_map_indexed<T, R, E, F>(items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync + Send,
{
    map_indexed(items, f).into_iter().collect()
}

/// True when this build scores and embeds on the rayon pool.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
