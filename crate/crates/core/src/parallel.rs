//! Order-preserving parallel map with a worker cap.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Apply `f` to every item on at most `jobs` workers (`0` = one per core).
///
/// Results come back in input order; on failure the error of the earliest
/// failing item is returned, so output does not depend on scheduling.
pub fn map<T, U, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    map_all(items, jobs, f)?.into_iter().collect()
}

/// Like [`map`] but keeps every per-item outcome.
pub fn map_all<T, U, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<Result<U>>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    if jobs == 1 || items.len() < 2 {
        return Ok(items.iter().map(&f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(&f).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order_and_first_error() {
        let xs: Vec<usize> = (0..50).collect();
        let seq = map(&xs, 1, |&x| Ok(x * x)).unwrap();
        let par = map(&xs, 4, |&x| Ok(x * x)).unwrap();
        assert_eq!(seq, par);
        let err = map(&xs, 4, |&x| if x % 7 == 3 { Err(Error::Data(x.to_string())) } else { Ok(x) });
        assert!(matches!(err, Err(Error::Data(m)) if m == "3"));
    }
}
