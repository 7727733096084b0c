//! Deterministic work-sharing for the partition sweep.
//!
//! Work is split into fixed-size chunks that are claimed by worker threads
//! through an atomic counter; results are folded strictly in chunk order, so
//! the output is byte-identical no matter how many threads run.

use std::sync::atomic::{AtomicU64, Ordering};

/// Items per chunk. Fixed (not derived from thread count) so that chunk
/// boundaries — and therefore floating-point summation order — never change.
pub const CHUNK_SIZE: u64 = 4096;

pub fn num_chunks(total: u64) -> u64 {
    total.div_ceil(CHUNK_SIZE)
}

/// Runs `work(chunk_index, start, end)` over every chunk of `0..total`, using
/// up to `threads` workers, and returns the per-chunk results in chunk order.
pub fn run_chunked<T, F>(total: u64, threads: usize, work: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, u64, u64) -> T + Sync,
{
    let chunks = num_chunks(total);
    let threads = threads.max(1).min(chunks.max(1) as usize);
    let next = AtomicU64::new(0);

    let mut tagged: Vec<(u64, T)> = std::thread::scope(|scope| {
        let next = &next;
        let work = &work;
        let handles: Vec<_> = (0..threads)
            .map(|_| {
                scope.spawn(move || {
                    let mut mine = Vec::new();
                    loop {
                        let chunk = next.fetch_add(1, Ordering::Relaxed);
                        if chunk >= chunks {
                            break;
                        }
                        let start = chunk * CHUNK_SIZE;
                        let end = (start + CHUNK_SIZE).min(total);
                        mine.push((chunk, work(chunk, start, end)));
                    }
                    mine
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });

    tagged.sort_by_key(|(chunk, _)| *chunk);
    tagged.into_iter().map(|(_, result)| result).collect()
}
