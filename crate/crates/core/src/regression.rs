//! Least-squares projection on polynomials of the forward state.
//!
//! States are centred and scaled per coordinate before the monomials are
//! formed; coordinates with (numerically) zero spread are dropped, so a
//! deterministic state reduces the basis to the intercept.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::parallel::chunked_vec_sum;

/// All exponent vectors in `n` variables with total degree `<= degree`,
/// ordered by degree, then lexicographically.
pub fn monomials(n: usize, degree: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![0u8; n]];
    for deg in 1..=degree {
        let mut cur = vec![0u8; n];
        collect_degree(n, deg, 0, &mut cur, &mut out);
    }
    out
}

fn collect_degree(n: usize, left: usize, pos: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
    if pos == n - 1 {
        cur[pos] = left as u8;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e as u8;
        collect_degree(n, left - e, pos + 1, cur, out);
    }
    cur[pos] = 0;
}

/// Basis and factorized Gram matrix for one regression state sample.
#[derive(Clone, Debug)]
pub struct Regressor {
    degree: usize,
    active: Vec<usize>,
    center: Vec<f64>,
    scale: Vec<f64>,
    exponents: Vec<Vec<u8>>,
    gram_factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    n_samples: usize,
    dim: usize,
}

impl Regressor {
    /// Build the basis for `states` (row-major, `dim` per sample). `step` is
    /// only used to label errors.
    pub fn fit(states: &[f64], dim: usize, degree: usize, step: usize) -> Result<Self> {
        let m = states.len() / dim;
        if m == 0 {
            return Err(Error::InvalidArgument("regression needs samples".into()));
        }
        let stats = chunked_vec_sum(m, 2 * dim, |i, acc| {
            for c in 0..dim {
                let v = states[i * dim + c];
                acc[c] += v;
                acc[dim + c] += v * v;
            }
        });
        let mut active = Vec::new();
        let mut center = Vec::new();
        let mut scale = Vec::new();
        for c in 0..dim {
            let mean = stats[c] / m as f64;
            // Second pass for the spread; the one-pass formula cancels badly.
            let var = chunked_vec_sum(m, 1, |i, acc| {
                acc[0] += (states[i * dim + c] - mean).powi(2)
            })[0]
                / m as f64;
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + mean.abs()) {
                active.push(c);
                center.push(mean);
                scale.push(sd);
            }
        }
        let exponents = monomials(active.len().max(1), degree);
        let exponents = if active.is_empty() {
            vec![vec![0u8]]
        } else {
            exponents
        };
        let p = exponents.len();
        let mut reg = Self {
            degree,
            active,
            center,
            scale,
            exponents,
            gram_factor: nalgebra::Cholesky::new(DMatrix::identity(1, 1)).unwrap(),
            n_samples: m,
            dim,
        };
        let gram = chunked_vec_sum(m, p * p, |i, acc| {
            let mut buf = Scratch::new(p);
            let phi = buf.get();
            reg.basis(&states[i * dim..(i + 1) * dim], phi);
            for a in 0..p {
                for b in 0..=a {
                    acc[a * p + b] += phi[a] * phi[b];
                }
            }
        });
        let mut g = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in 0..=a {
                let v = gram[a * p + b] / m as f64;
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        let singular = || Error::SingularRegression {
            step,
            degree,
            terms: p,
        };
        let chol = nalgebra::Cholesky::new(g).ok_or_else(singular)?;
        let l = chol.l_dirty();
        let diag: Vec<f64> = (0..p).map(|a| l[(a, a)].abs()).collect();
        let dmax = diag.iter().cloned().fold(0.0, f64::max);
        let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(dmin > 1e-7 * dmax) {
            return Err(singular());
        }
        reg.gram_factor = chol;
        Ok(reg)
    }

    pub fn n_terms(&self) -> usize {
        self.exponents.len()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// True when every state coordinate was degenerate.
    pub fn intercept_only(&self) -> bool {
        self.active.is_empty()
    }

    #[inline]
    pub fn basis(&self, x: &[f64], out: &mut [f64]) {
        if self.active.is_empty() {
            out[0] = 1.0;
            return;
        }
        let na = self.active.len();
        let deg = self.degree;
        // powers[c * (deg + 1) + e] = u_c^e
        let mut powers = [0.0f64; 16];
        let use_stack = na * (deg + 1) <= 16;
        let mut heap;
        let pw: &mut [f64] = if use_stack {
            &mut powers[..na * (deg + 1)]
        } else {
            heap = vec![0.0; na * (deg + 1)];
            &mut heap
        };
        for (j, &c) in self.active.iter().enumerate() {
            let u = (x[c] - self.center[j]) / self.scale[j];
            let mut v = 1.0;
            for e in 0..=deg {
                pw[j * (deg + 1) + e] = v;
                v *= u;
            }
        }
        for (o, ex) in out.iter_mut().zip(&self.exponents) {
            let mut v = 1.0;
            for (j, &e) in ex.iter().enumerate() {
                if e > 0 {
                    v *= pw[j * (deg + 1) + e as usize];
                }
            }
            *o = v;
        }
    }

    /// Coefficients for `width` regressands at once: `target(i, out)` writes
    /// the regressands of sample `i`. Returns `width` coefficient vectors.
    pub fn project<T>(&self, states: &[f64], width: usize, target: T) -> Vec<Vec<f64>>
    where
        T: Fn(usize, &mut [f64]) + Sync,
    {
        let p = self.n_terms();
        let m = self.n_samples;
        let dim = self.dim;
        let rhs = chunked_vec_sum(m, p * width, |i, acc| {
            let mut pb = Scratch::new(p);
            let mut tb = Scratch::new(width);
            let (phi, tv) = (pb.get(), tb.get());
            self.basis(&states[i * dim..(i + 1) * dim], phi);
            target(i, tv);
            for (q, &t) in tv.iter().enumerate() {
                for a in 0..p {
                    acc[q * p + a] += phi[a] * t;
                }
            }
        });
        (0..width)
            .map(|q| {
                let b =
                    DVector::from_iterator(p, rhs[q * p..(q + 1) * p].iter().map(|v| v / m as f64));
                self.gram_factor.solve(&b).iter().cloned().collect()
            })
            .collect()
    }

    #[inline]
    pub fn eval(&self, coef: &[f64], x: &[f64], scratch: &mut [f64]) -> f64 {
        self.basis(x, scratch);
        coef.iter().zip(scratch.iter()).map(|(c, p)| c * p).sum()
    }
}

impl Regressor {
    /// Bootstrap standard error of the fitted value `φ(x_i)ᵀĉ` at every
    /// sample: the coefficients are refitted on `resamples` resampled path
    /// sets and their covariance is pushed through the basis.
    pub fn bootstrap_prediction_se(
        &self,
        states: &[f64],
        target: &[f64],
        resamples: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let p = self.n_terms();
        let m = self.n_samples;
        let dim = self.dim;
        if target.len() != m || resamples < 2 {
            return Err(Error::InvalidArgument(
                "bootstrap needs one target per sample and at least two resamples".into(),
            ));
        }
        let mut phi = vec![0.0; m * p];
        for i in 0..m {
            self.basis(
                &states[i * dim..(i + 1) * dim],
                &mut phi[i * p..(i + 1) * p],
            );
        }
        let coefs: Vec<Option<Vec<f64>>> = (0..resamples)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(b as u64);
                let mut g = DMatrix::<f64>::zeros(p, p);
                let mut v = DVector::<f64>::zeros(p);
                for _ in 0..m {
                    let j = rng.random_range(0..m);
                    let f = &phi[j * p..(j + 1) * p];
                    for a in 0..p {
                        v[a] += f[a] * target[j];
                        for c in 0..=a {
                            g[(a, c)] += f[a] * f[c];
                        }
                    }
                }
                for a in 0..p {
                    for c in 0..a {
                        g[(c, a)] = g[(a, c)];
                    }
                }
                nalgebra::Cholesky::new(g).map(|ch| ch.solve(&v).iter().cloned().collect())
            })
            .collect();
        let ok: Vec<Vec<f64>> = coefs.into_iter().flatten().collect();
        if ok.len() < 2 {
            return Err(Error::SingularRegression {
                step: 0,
                degree: self.degree,
                terms: p,
            });
        }
        let nb = ok.len() as f64;
        let mean: Vec<f64> = (0..p)
            .map(|a| ok.iter().map(|c| c[a]).sum::<f64>() / nb)
            .collect();
        let mut cov = vec![0.0; p * p];
        for c in &ok {
            for a in 0..p {
                for e in 0..p {
                    cov[a * p + e] += (c[a] - mean[a]) * (c[e] - mean[e]);
                }
            }
        }
        cov.iter_mut().for_each(|v| *v /= nb - 1.0);
        Ok((0..m)
            .into_par_iter()
            .map(|i| {
                let f = &phi[i * p..(i + 1) * p];
                let mut q = 0.0;
                for a in 0..p {
                    for e in 0..p {
                        q += f[a] * cov[a * p + e] * f[e];
                    }
                }
                q.max(0.0).sqrt()
            })
            .collect())
    }
}

/// Regression on the features `φ(x) ⊗ (1, c_1, .., c_q)`, where the controls
/// `c` have zero conditional mean given `x`. Only the `φ(x)` block of the
/// solution is returned: the estimand `E[target | x]` is unchanged while the
/// control columns soak up part of the sampling noise.
#[derive(Clone, Debug)]
pub struct ControlledProjector {
    p: usize,
    q: usize,
    gram_factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl ControlledProjector {
    pub fn fit(
        reg: &Regressor,
        states: &[f64],
        controls: &[f64],
        q: usize,
        step: usize,
    ) -> Result<Self> {
        let p = reg.n_terms();
        let w = p * (1 + q);
        let m = reg.n_samples;
        let dim = reg.dim;
        let gram = chunked_vec_sum(m, w * w, |i, acc| {
            let mut fb = Scratch::new(w);
            let feat = fb.get();
            features(
                reg,
                &states[i * dim..(i + 1) * dim],
                &controls[i * q..(i + 1) * q],
                feat,
            );
            for a in 0..w {
                for b in 0..=a {
                    acc[a * w + b] += feat[a] * feat[b];
                }
            }
        });
        let mut g = DMatrix::zeros(w, w);
        for a in 0..w {
            for b in 0..=a {
                let v = gram[a * w + b] / m as f64;
                g[(a, b)] = v;
                g[(b, a)] = v;
            }
        }
        let singular = || Error::SingularRegression {
            step,
            degree: reg.degree,
            terms: w,
        };
        let chol = nalgebra::Cholesky::new(g).ok_or_else(singular)?;
        let l = chol.l_dirty();
        let diag: Vec<f64> = (0..w).map(|a| l[(a, a)].abs()).collect();
        let dmax = diag.iter().cloned().fold(0.0, f64::max);
        let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(dmin > 1e-7 * dmax) {
            return Err(singular());
        }
        Ok(Self {
            p,
            q,
            gram_factor: chol,
        })
    }

    /// Coefficients of the `φ` block for `width` regressands.
    pub fn project<T>(
        &self,
        reg: &Regressor,
        states: &[f64],
        controls: &[f64],
        width: usize,
        target: T,
    ) -> Vec<Vec<f64>>
    where
        T: Fn(usize, &mut [f64]) + Sync,
    {
        let (p, q) = (self.p, self.q);
        let w = p * (1 + q);
        let m = reg.n_samples;
        let dim = reg.dim;
        let rhs = chunked_vec_sum(m, w * width, |i, acc| {
            let mut fb = Scratch::new(w);
            let mut tb = Scratch::new(width);
            let (feat, tv) = (fb.get(), tb.get());
            features(
                reg,
                &states[i * dim..(i + 1) * dim],
                &controls[i * q..(i + 1) * q],
                feat,
            );
            target(i, tv);
            for (r, &t) in tv.iter().enumerate() {
                for a in 0..w {
                    acc[r * w + a] += feat[a] * t;
                }
            }
        });
        (0..width)
            .map(|r| {
                let b =
                    DVector::from_iterator(w, rhs[r * w..(r + 1) * w].iter().map(|v| v / m as f64));
                self.gram_factor.solve(&b).iter().take(p).cloned().collect()
            })
            .collect()
    }
}

/// Small per-sample buffer, on the stack when it fits.
enum Scratch {
    Stack([f64; 32], usize),
    Heap(Vec<f64>),
}

impl Scratch {
    #[inline]
    fn new(len: usize) -> Self {
        if len <= 32 {
            Self::Stack([0.0; 32], len)
        } else {
            Self::Heap(vec![0.0; len])
        }
    }

    #[inline]
    fn get(&mut self) -> &mut [f64] {
        match self {
            Self::Stack(a, n) => &mut a[..*n],
            Self::Heap(v) => v,
        }
    }
}

fn features(reg: &Regressor, x: &[f64], c: &[f64], out: &mut [f64]) {
    let p = reg.n_terms();
    reg.basis(x, &mut out[..p]);
    for (j, cv) in c.iter().enumerate() {
        for a in 0..p {
            out[(j + 1) * p + a] = out[a] * cv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::path_normals;

    #[test]
    fn controls_keep_the_estimand() {
        // target = x + c with E[c | x] = 0: the φ block must recover x exactly
        // when c is in the control span.
        let z = path_normals(1, 0, 2000);
        let x: Vec<f64> = z[..1000].to_vec();
        let c: Vec<f64> = z[1000..].iter().map(|v| v * v - 1.0).collect();
        let reg = Regressor::fit(&x, 1, 1, 0).unwrap();
        let cp = ControlledProjector::fit(&reg, &x, &c, 1, 0).unwrap();
        let coef = cp.project(&reg, &x, &c, 1, |i, o| o[0] = x[i] + 3.0 * c[i]);
        let mut s = vec![0.0; 2];
        assert!((reg.eval(&coef[0], &[0.4], &mut s) - 0.4).abs() < 1e-10);
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(1, 3).len(), 4);
        assert_eq!(monomials(2, 3).len(), 10);
        assert_eq!(monomials(3, 2).len(), 10);
        assert_eq!(monomials(2, 0), vec![vec![0, 0]]);
    }

    #[test]
    fn recovers_cubic_exactly() {
        let x: Vec<f64> = (0..500).map(|i| -2.0 + 4.0 * i as f64 / 499.0).collect();
        let reg = Regressor::fit(&x, 1, 3, 0).unwrap();
        let f = |v: f64| 1.0 - 2.0 * v + 0.5 * v.powi(3);
        let coef = reg.project(&x, 1, |i, out| out[0] = f(x[i]));
        let mut s = vec![0.0; 4];
        for &v in &[-1.5, 0.0, 0.3, 1.9] {
            assert!((reg.eval(&coef[0], &[v], &mut s) - f(v)).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_state_is_intercept_only() {
        let x = vec![0.7; 100];
        let reg = Regressor::fit(&x, 1, 3, 0).unwrap();
        assert!(reg.intercept_only());
        let y: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let coef = reg.project(&x, 1, |i, out| out[0] = y[i]);
        assert!((coef[0][0] - 49.5).abs() < 1e-12);
    }

    #[test]
    fn too_few_distinct_points_is_singular() {
        let x: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let err = Regressor::fit(&x, 1, 3, 4).unwrap_err();
        assert!(matches!(
            err,
            Error::SingularRegression {
                step: 4,
                degree: 3,
                terms: 4
            }
        ));
        assert!(Regressor::fit(&x, 1, 1, 4).is_ok());
    }

    #[test]
    fn two_dimensional_with_degenerate_coordinate() {
        let z = path_normals(0, 0, 400);
        let states: Vec<f64> = z.iter().flat_map(|&v| [v, 5.0]).collect();
        let reg = Regressor::fit(&states, 2, 2, 0).unwrap();
        assert_eq!(reg.n_terms(), 3);
        let coef = reg.project(&states, 2, |i, out| {
            out[0] = 2.0 * z[i] * z[i];
            out[1] = 1.0;
        });
        let mut s = vec![0.0; 3];
        assert!((reg.eval(&coef[0], &[0.5, 5.0], &mut s) - 0.5).abs() < 1e-9);
        assert!((reg.eval(&coef[1], &[0.5, 5.0], &mut s) - 1.0).abs() < 1e-12);
    }
}
