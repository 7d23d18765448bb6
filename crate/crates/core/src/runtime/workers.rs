use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many output elements a kernel runs on the calling thread.
const PARALLEL_MIN_ELEMENTS: usize = 4096;

/// Fixed-size worker pool that hands each worker one contiguous range of
/// output rows. Every output element is produced by exactly one worker with
/// the same scalar loop, so results do not depend on the thread count.
pub(crate) struct Workers {
    threads: usize,
    pool: Option<rayon::ThreadPool>,
}

impl Workers {
    pub fn new(threads: usize) -> Result<Self> {
        if threads == 0 {
            return Err(Error::invalid("thread count must be at least 1"));
        }
        let pool = if threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .thread_name(|i| format!("emdl-worker-{i}"))
                    .build()
                    .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Workers { threads, pool })
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// Splits `out` (rows of `row_len`) into at most `threads` contiguous
    /// blocks and calls `f(first_row, block, scratch)` for each.
    pub fn for_rows<T, F>(&self, out: &mut [T], row_len: usize, scratch: &mut [Vec<i32>], f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T], &mut Vec<i32>) + Sync,
    {
        debug_assert!(row_len > 0 && out.len().is_multiple_of(row_len));
        debug_assert!(scratch.len() >= self.threads);
        let rows = out.len() / row_len;
        match &self.pool {
            Some(pool) if out.len() >= PARALLEL_MIN_ELEMENTS && rows > 1 => {
                let (rows_per, _) = work_share(rows, self.threads);
                pool.install(|| {
                    out.par_chunks_mut(rows_per * row_len)
                        .zip(scratch.par_iter_mut())
                        .enumerate()
                        .for_each(|(i, (block, s))| f(i * rows_per, block, s));
                });
            }
            _ => f(0, out, &mut scratch[0]),
        }
    }
}

/// `(rows_per_worker, workers_used)` for `total` rows over `max_workers`.
pub(crate) fn work_share(total: usize, max_workers: usize) -> (usize, usize) {
    let workers = total.min(max_workers).max(1);
    let per = total.div_ceil(workers).max(1);
    (per, total.div_ceil(per))
}
