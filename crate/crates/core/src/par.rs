//! Block-parallel Monte Carlo with a fixed reduction order.
//!
//! Work is cut into blocks of a fixed size that does not depend on the
//! number of worker threads. Block `b` draws only from `stream.split(b)` and
//! the per-block results are returned in block order, so any reduction done
//! by the caller over the returned vector is bit-reproducible.

use crate::stream::RngStream;
use rayon::prelude::*;
use std::ops::Range;

pub const DEFAULT_BLOCK: usize = 1024;

pub fn map_blocks<T, F>(total: usize, block: usize, stream: &RngStream, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>, &RngStream) -> T + Sync + Send,
{
    assert!(block > 0);
    let nblocks = total.div_ceil(block);
    (0..nblocks)
        .into_par_iter()
        .map(|b| {
            let start = b * block;
            let end = (start + block).min(total);
            f(start..end, &stream.split(b as u64))
        })
        .collect()
}
