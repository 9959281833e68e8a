//! Order-independent parallel reductions.
//!
//! Floating-point sums depend on association order, and rayon's adaptive
//! splitting depends on the worker count. Every reduction in this crate goes
//! through [`chunked_sum`] and friends: partial sums over fixed-size chunks are
//! computed in parallel, then folded left to right, so results are bit-identical
//! for any number of threads.

use rayon::prelude::*;

/// Fixed chunk length for every reduction.
pub const CHUNK: usize = 2048;

/// Deterministic sum of `f(i)` for `i` in `0..n`.
pub fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut s = 0.0;
            for i in lo..hi {
                s += f(i);
            }
            s
        })
        .collect();
    partials.into_iter().sum()
}

/// Deterministic vector-valued sum: `f(i, acc)` adds the contribution of item
/// `i` into an accumulator of length `width`.
pub fn chunked_vec_sum<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut acc = vec![0.0; width];
            for i in lo..hi {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Deterministic mean of `f(i)`.
pub fn chunked_mean<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    chunked_sum(n, f) / n as f64
}

/// Run `op` on a pool capped at `threads` workers (0 = rayon default).
pub fn with_threads<R: Send>(threads: usize, op: impl FnOnce() -> R + Send) -> R {
    if threads == 0 {
        return op();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(op),
        Err(_) => op(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_identical_across_pool_sizes() {
        let f = |i: usize| ((i as f64) * 0.37).sin() * 1e3 + 1e-7 * i as f64;
        let one = with_threads(1, || chunked_sum(100_003, f));
        let four = with_threads(4, || chunked_sum(100_003, f));
        let seven = with_threads(7, || chunked_sum(100_003, f));
        assert_eq!(one.to_bits(), four.to_bits());
        assert_eq!(one.to_bits(), seven.to_bits());
    }

    #[test]
    fn vec_sum_matches_scalar() {
        let v = chunked_vec_sum(5000, 2, |i, acc| {
            acc[0] += i as f64;
            acc[1] += 1.0;
        });
        assert_eq!(v[0], (0..5000).map(|i| i as f64).sum::<f64>());
        assert_eq!(v[1], 5000.0);
    }
}
