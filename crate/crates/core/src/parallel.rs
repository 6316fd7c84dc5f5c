//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (default) the map runs on rayon's pool;
//! without it, the sequential fallback runs in place. Both preserve input
//! order, so results are identical either way.

/// Maps `f` over `items`, in parallel when the feature allows it.
pub fn run_all<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Always-sequential variant, kept for benchmarking against [`run_all`].
pub fn run_all_sequential<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}
