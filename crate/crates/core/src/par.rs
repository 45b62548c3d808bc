//! Ordered map over independent work items, on rayon when the `parallel`
//! feature is enabled and the caller asks for it, sequential otherwise.
//!
//! Results always come back in input order, so reductions over them are
//! identical for any thread count.

#[cfg(feature = "parallel")]
pub fn map_ordered<T, R, F>(parallel: bool, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if parallel {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, R, F>(_parallel: bool, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Collects per-item results, returning the error of the lowest-index
/// failure so the reported error does not depend on scheduling.
pub fn try_map_ordered<T, R, E, F>(parallel: bool, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync + Send,
{
    map_ordered(parallel, items, f).into_iter().collect()
}
