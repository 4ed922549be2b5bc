//! Order-preserving map over independent work items.
//!
//! Each item gets its own tape, so items never share mutable state. With the
//! `parallel` feature and `threads != 1` the items run on a rayon pool
//! (`threads == 0` means one thread per core); otherwise they run in order on
//! the calling thread. Results are returned in input order either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if threads != 1 && items.len() > 1 {
        let run = || items.par_iter().map(&f).collect();
        if threads == 0 {
            return run();
        }
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => return pool.install(run),
            Err(_) => return items.iter().map(&f).collect(),
        }
    }
    let _ = threads;
    items.iter().map(f).collect()
}

/// [`map`] over `0..n`.
pub fn map_range<R, F>(n: usize, threads: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map(&idx, threads, |&i| f(i))
}

pub fn enabled() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order() {
        let out = map_range(100, 4, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
        assert_eq!(map_range(100, 1, |i| i * i), out);
    }
}
