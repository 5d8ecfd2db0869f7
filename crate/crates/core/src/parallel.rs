//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature the items run on the rayon pool unless
//! `MIA_SINGLE_THREAD=1` is set; otherwise they run in order on the calling
//! thread. Results always come back in item order, so callers that reduce
//! them sequentially are deterministic either way.

pub const SINGLE_THREAD_ENV: &str = "MIA_SINGLE_THREAD";

pub fn single_threaded() -> bool {
    std::env::var(SINGLE_THREAD_ENV).is_ok_and(|v| v.trim() == "1")
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !single_threaded()
}

pub fn map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if !single_threaded() {
        use rayon::prelude::*;
        return items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Sequential reference of [`map`], used by benches and tests.
pub fn map_sequential<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(usize, &I) -> O,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}
