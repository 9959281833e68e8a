//! Reproducible Brownian increments.
//!
//! Each global path index owns a ChaCha8 stream (key from the master seed,
//! stream id = path index), and the increments of a path are the stream's
//! words consumed in (step, component) order. A path therefore depends only on
//! `(master_seed, path)`, whatever range or thread count produced it.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// Hard ceiling on a single bundle, in f64 values (16 GiB).
const MAX_VALUES: u128 = 1 << 31;

#[derive(Clone, Debug)]
pub struct BrownianBundle {
    grid: TimeGrid,
    dim: usize,
    first_path: usize,
    n_paths: usize,
    master_seed: u64,
    increments: Vec<f64>,
}

/// Uniform on the open unit interval from the top 53 bits of a word.
#[inline]
fn open_uniform(word: u64) -> f64 {
    ((word >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal quantile.
#[inline]
pub fn normal_quantile(u: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
}

fn path_stream(master_seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(path as u64);
    rng
}

/// Standard normal draws of one global path, in (step, component) order.
pub fn path_normals(master_seed: u64, path: usize, count: usize) -> Vec<f64> {
    let mut rng = path_stream(master_seed, path);
    (0..count)
        .map(|_| normal_quantile(open_uniform(rng.next_u64())))
        .collect()
}

pub fn check_storage(parts: &[usize]) -> Result<usize> {
    let total: u128 = parts.iter().map(|&p| p as u128).product();
    if total > MAX_VALUES || total > usize::MAX as u128 {
        let shown: Vec<String> = parts.iter().map(|p| p.to_string()).collect();
        return Err(Error::StorageOverflow {
            requested: shown.join(" x "),
        });
    }
    Ok(total as usize)
}

/// Bundle of paths `0..n_paths`.
pub fn sample_brownian(
    grid: TimeGrid,
    dim: usize,
    n_paths: usize,
    master_seed: u64,
) -> Result<BrownianBundle> {
    sample_brownian_range(grid, dim, 0, n_paths, master_seed)
}

/// Bundle of the global paths `first_path..first_path + n_paths`.
pub fn sample_brownian_range(
    grid: TimeGrid,
    dim: usize,
    first_path: usize,
    n_paths: usize,
    master_seed: u64,
) -> Result<BrownianBundle> {
    if dim == 0 {
        return Err(Error::InvalidArgument(
            "Brownian dimension must be >= 1".into(),
        ));
    }
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be >= 1".into()));
    }
    let per_path = check_storage(&[grid.n_steps(), dim])?;
    let total = check_storage(&[n_paths, grid.n_steps(), dim])?;
    let sqdt = grid.dt().sqrt();
    let mut increments = vec![0.0; total];
    increments
        .par_chunks_mut(per_path)
        .enumerate()
        .for_each(|(i, row)| {
            let mut rng = path_stream(master_seed, first_path + i);
            for v in row.iter_mut() {
                *v = sqdt * normal_quantile(open_uniform(rng.next_u64()));
            }
        });
    Ok(BrownianBundle {
        grid,
        dim,
        first_path,
        n_paths,
        master_seed,
        increments,
    })
}

impl BrownianBundle {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn first_path(&self) -> usize {
        self.first_path
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    /// Increment ΔB over `[t_step, t_step+1]` for local path `path`.
    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let o = (path * self.grid.n_steps() + step) * self.dim;
        &self.increments[o..o + self.dim]
    }

    /// All increments of one path, flattened as `[step][component]`.
    #[inline]
    pub fn path_increments(&self, path: usize) -> &[f64] {
        let w = self.grid.n_steps() * self.dim;
        &self.increments[path * w..(path + 1) * w]
    }

    pub fn raw(&self) -> &[f64] {
        &self.increments
    }

    /// `B_{t_k}` for local path `path` (component-wise partial sum).
    pub fn value(&self, path: usize, k: usize) -> Vec<f64> {
        let mut b = vec![0.0; self.dim];
        for step in 0..k {
            for (acc, inc) in b.iter_mut().zip(self.increment(path, step)) {
                *acc += inc;
            }
        }
        b
    }

    /// Terminal value `B_{t1}` (first component) for every path.
    pub fn terminal_values(&self) -> Vec<f64> {
        (0..self.n_paths)
            .map(|i| self.value(i, self.n_steps())[0])
            .collect()
    }

    /// Sub-bundle of local paths `lo..hi`.
    pub fn slice(&self, lo: usize, hi: usize) -> Result<BrownianBundle> {
        if lo >= hi || hi > self.n_paths {
            return Err(Error::InvalidArgument(format!(
                "path range {lo}..{hi} outside bundle of {} paths",
                self.n_paths
            )));
        }
        let w = self.grid.n_steps() * self.dim;
        Ok(BrownianBundle {
            grid: self.grid,
            dim: self.dim,
            first_path: self.first_path + lo,
            n_paths: hi - lo,
            master_seed: self.master_seed,
            increments: self.increments[lo * w..hi * w].to_vec(),
        })
    }

    /// Same paths, but with a permuted path order (local index `i` takes the
    /// path previously at `perm[i]`).
    pub fn permuted(&self, perm: &[usize]) -> Result<BrownianBundle> {
        if perm.len() != self.n_paths {
            return Err(Error::InvalidArgument("permutation length mismatch".into()));
        }
        let w = self.grid.n_steps() * self.dim;
        let mut increments = Vec::with_capacity(self.increments.len());
        for &p in perm {
            increments.extend_from_slice(&self.increments[p * w..(p + 1) * w]);
        }
        Ok(BrownianBundle {
            increments,
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::with_threads;

    fn grid(n: usize, t: f64) -> TimeGrid {
        TimeGrid::new(0.0, t, n).unwrap()
    }

    #[test]
    fn determinism() {
        let g = grid(8, 1.0);
        let a = sample_brownian(g, 2, 300, 42).unwrap();
        let b = sample_brownian(g, 2, 300, 42).unwrap();
        assert_eq!(a.raw(), b.raw());
        let c = sample_brownian(g, 2, 300, 43).unwrap();
        assert_ne!(a.raw(), c.raw());
    }

    #[test]
    fn thread_count_irrelevant() {
        let g = grid(16, 1.0);
        let a = with_threads(1, || sample_brownian(g, 1, 5000, 7).unwrap());
        let b = with_threads(3, || sample_brownian(g, 1, 5000, 7).unwrap());
        assert_eq!(a.raw(), b.raw());
    }

    #[test]
    fn prefix_stability() {
        let g = grid(10, 1.0);
        let small = sample_brownian(g, 1, 100, 5).unwrap();
        let big = sample_brownian(g, 1, 200, 5).unwrap();
        assert_eq!(small.raw(), &big.raw()[..small.raw().len()]);
        let tail = sample_brownian_range(g, 1, 100, 100, 5).unwrap();
        assert_eq!(tail.raw(), &big.raw()[small.raw().len()..]);
        assert_eq!(big.slice(100, 200).unwrap().raw(), tail.raw());
    }

    #[test]
    fn per_path_draws_match_bundle() {
        let g = grid(4, 2.0);
        let b = sample_brownian_range(g, 3, 17, 2, 11).unwrap();
        let z = path_normals(11, 18, 12);
        let sq = g.dt().sqrt();
        for (inc, zz) in b.path_increments(1).iter().zip(z) {
            assert_eq!(*inc, sq * zz);
        }
    }

    #[test]
    fn storage_overflow_rejected_before_allocation() {
        let g = grid(1_000_000, 1.0);
        let err = sample_brownian(g, 4, 1_000_000_000, 0).unwrap_err();
        assert!(matches!(err, Error::StorageOverflow { .. }));
    }

    #[test]
    fn per_step_variance_band() {
        // Sample variance of M Gaussians with variance dt has sd sqrt(2/M) dt.
        let m = 100_000;
        let g = grid(100, 1.0);
        let dt = g.dt();
        let b = sample_brownian(g, 1, m, 2024).unwrap();
        let band = 3.0 * (2.0 / m as f64).sqrt() * dt;
        let mut failures = 0;
        for k in 0..g.n_steps() {
            let mean: f64 = (0..m).map(|i| b.increment(i, k)[0]).sum::<f64>() / m as f64;
            let var: f64 = (0..m)
                .map(|i| (b.increment(i, k)[0] - mean).powi(2))
                .sum::<f64>()
                / (m - 1) as f64;
            if (var - dt).abs() > band {
                failures += 1;
            }
        }
        // 3-sigma band: a couple of the 100 steps may fall outside by chance.
        assert!(failures <= 2, "{failures} steps outside the band");
    }

    #[test]
    fn standardized_moments() {
        let m = 20_000;
        let g = grid(5, 0.5);
        let b = sample_brownian(g, 2, m, 99).unwrap();
        let sq = g.dt().sqrt();
        let z: Vec<f64> = b.raw().iter().map(|v| v / sq).collect();
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let var = z.iter().map(|v| v * v).sum::<f64>() / n;
        let kurt = z.iter().map(|v| v.powi(4)).sum::<f64>() / n;
        // CLT bands: sd of mean 1/sqrt(n), of E z^2 sqrt(2/n), of E z^4 sqrt(96/n).
        assert!(mean.abs() < 4.0 / n.sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n).sqrt(), "var {var}");
        assert!(
            (kurt - 3.0).abs() < 4.0 * (96.0 / n).sqrt(),
            "kurtosis {kurt}"
        );
    }

    #[test]
    fn path_values_are_partial_sums() {
        let g = grid(3, 1.0);
        let b = sample_brownian(g, 1, 2, 1).unwrap();
        let inc: Vec<f64> = (0..3).map(|k| b.increment(1, k)[0]).collect();
        assert_eq!(b.value(1, 0), vec![0.0]);
        assert_eq!(b.value(1, 2)[0], inc[0] + inc[1]);
    }

    #[test]
    fn quantile_symmetry() {
        for &u in &[1e-6, 0.01, 0.3, 0.5] {
            assert!((normal_quantile(u) + normal_quantile(1.0 - u)).abs() < 1e-9);
        }
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
    }
}
