//! Worker-count control.
//!
//! `PRISM_THREADS` caps the number of rayon workers used inside module
//! operations. Unset (or unparsable) means a single worker. Work is always
//! split into fixed-size chunks whose partial results are merged in chunk
//! order, so outputs do not depend on the worker count.

use rayon::prelude::*;

pub const THREADS_ENV: &str = "PRISM_THREADS";

pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Maps `f` over `items` in order-preserving fashion, in parallel when more
/// than one worker is configured.
pub fn ordered_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    let workers = worker_count();
    if workers <= 1 || items.len() < 2 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| {
            items
                .par_iter()
                .enumerate()
                .map(|(i, t)| f(i, t))
                .collect()
        }),
        Err(_) => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}
