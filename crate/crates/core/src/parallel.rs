//! Deterministic per-trajectory random streams and worker-count control.
//!
//! Every trajectory draws from its own ChaCha stream keyed by
//! `(master_seed, trajectory_index)`, and results are collected into an
//! index-ordered buffer before any reduction, so outputs do not depend on the
//! number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub fn trajectory_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

/// `f(0), .., f(n-1)` evaluated in parallel, returned in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    (0..n as u64)
        .into_par_iter()
        .map(|j| f(j).map_err(|e| e.with_trajectory(j)))
        .collect()
}

/// Run `f` on a pool with `workers` threads (0 = rayon default).
pub fn with_workers<T: Send, F: FnOnce() -> T + Send>(workers: usize, f: F) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}
