//! Small numeric helpers shared across modules.

use rayon::prelude::*;

/// Default chunk length for [`chunked_reduce`]. Chunking never depends on the
/// thread count and partials fold left to right, so parallel reductions are
/// bit-identical to a single-threaded run.
pub const REDUCE_CHUNK: usize = 1024;

/// Maps `0..n` in fixed chunks of `chunk` items (possibly in parallel) and
/// folds the partial results in chunk order.
pub fn chunked_reduce<T, M, F>(n: usize, chunk: usize, map: M, mut fold: F) -> Option<T>
where
    T: Send,
    M: Fn(std::ops::Range<usize>) -> T + Sync,
    F: FnMut(T, T) -> T,
{
    let chunks: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(chunk.max(1))
        .map(|start| start..(start + chunk.max(1)).min(n))
        .collect();
    let partials: Vec<T> = chunks.into_par_iter().map(&map).collect();
    let mut iter = partials.into_iter();
    let first = iter.next()?;
    Some(iter.fold(first, &mut fold))
}

/// `log(sum(exp(values)))` without overflow. Empty input gives `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
