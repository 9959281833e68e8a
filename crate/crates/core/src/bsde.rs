//! Regression Monte Carlo for classical and mean-field BSDEs.
//!
//! Backward induction on the forward grid: `Ŷ_k = E[Y_{k+1} | X_k]`,
//! `Z_k = E[(Y_{k+1} - Ŷ_k) ΔB_k | X_k] / Δt`, `Y_k = Ŷ_k + g(t_k, X_k, Ŷ_k, Z_k) Δt`.
//! The mean-field equation is solved by Picard iteration: the law arguments
//! `(Y', Z')` are frozen at the previous iterate, which turns every sweep into
//! a classical solve.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::brownian::BrownianBundle;
use crate::error::{Error, Result};
use crate::forward::ParticleCloud;
use crate::grid::TimeGrid;
use crate::parallel::{chunked_mean, chunked_sum};
use crate::regression::{ControlledProjector, Regressor};

/// Arguments of a driver `f(t, x', x, y', y, z', z)`. Primed slots come from
/// the independent copy.
#[derive(Clone, Copy, Debug)]
pub struct DriverArgs<'a> {
    pub t: f64,
    pub x_prime: &'a [f64],
    pub x: &'a [f64],
    pub y_prime: f64,
    pub y: f64,
    pub z_prime: &'a [f64],
    pub z: &'a [f64],
}

/// `(t, x, y, z)`
pub type LocalFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;
/// `(t, x', y', z')`
pub type CouplingFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;
pub type GeneralFn = Arc<dyn Fn(&DriverArgs) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum DriverForm {
    /// `f = local(t, x, y, z) + coupling(t, x', y', z')`; the average over
    /// the copy costs one pass over the law per time step.
    Separable {
        local: LocalFn,
        coupling: Option<CouplingFn>,
    },
    /// Arbitrary dependence, averaged explicitly atom by atom.
    General(GeneralFn),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct DriverFlags {
    pub independent_of_zprime: bool,
    pub nondecreasing_in_yprime: bool,
}

#[derive(Clone)]
pub struct Driver {
    pub form: DriverForm,
    pub lipschitz_c: f64,
    pub flags: DriverFlags,
    /// Average `General` drivers over the first K atoms only.
    pub law_subsample: Option<usize>,
}

impl fmt::Debug for Driver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let form = match &self.form {
            DriverForm::Separable { coupling, .. } => {
                if coupling.is_some() {
                    "separable"
                } else {
                    "law-free"
                }
            }
            DriverForm::General(_) => "general",
        };
        f.debug_struct("Driver")
            .field("form", &form)
            .field("lipschitz_c", &self.lipschitz_c)
            .field("flags", &self.flags)
            .finish()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DriverProbe {
    pub probes: usize,
    pub max_lipschitz_quotient: f64,
    pub monotonicity_violations: usize,
    pub zprime_sensitivity: f64,
}

/// One time slice of the joint law `(X', Y', Z')` fed to the driver.
#[derive(Clone, Copy, Debug)]
pub struct LawSlice<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub z: &'a [f64],
    pub n: usize,
    pub d: usize,
}

impl<'a> LawSlice<'a> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn x(&self, j: usize) -> &'a [f64] {
        &self.x[j * self.n..(j + 1) * self.n]
    }

    fn z(&self, j: usize) -> &'a [f64] {
        &self.z[j * self.d..(j + 1) * self.d]
    }
}

/// `E'[f(t, X', x, Y', y, Z', z)]` for one fixed `t` and law slice, as a
/// function of `(x, y, z)`.
pub enum AveragedDriver<'a> {
    Local {
        local: &'a LocalFn,
        t: f64,
        shift: f64,
    },
    Explicit {
        f: &'a GeneralFn,
        t: f64,
        law: LawSlice<'a>,
        atoms: usize,
    },
}

impl AveragedDriver<'_> {
    #[inline]
    pub fn eval(&self, x: &[f64], y: f64, z: &[f64]) -> f64 {
        match self {
            AveragedDriver::Local { local, t, shift } => local(*t, x, y, z) + shift,
            AveragedDriver::Explicit { f, t, law, atoms } => {
                let mut s = 0.0;
                for j in 0..*atoms {
                    s += f(&DriverArgs {
                        t: *t,
                        x_prime: law.x(j),
                        x,
                        y_prime: law.y[j],
                        y,
                        z_prime: law.z(j),
                        z,
                    });
                }
                s / *atoms as f64
            }
        }
    }
}

impl Driver {
    pub fn separable(
        local: impl Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync + 'static,
        coupling: Option<CouplingFn>,
        lipschitz_c: f64,
        flags: DriverFlags,
    ) -> Self {
        Self {
            form: DriverForm::Separable {
                local: Arc::new(local),
                coupling,
            },
            lipschitz_c,
            flags,
            law_subsample: None,
        }
    }

    pub fn general(
        f: impl Fn(&DriverArgs) -> f64 + Send + Sync + 'static,
        lipschitz_c: f64,
        flags: DriverFlags,
    ) -> Self {
        Self {
            form: DriverForm::General(Arc::new(f)),
            lipschitz_c,
            flags,
            law_subsample: None,
        }
    }

    /// The zero driver.
    pub fn zero() -> Self {
        Self::separable(
            |_, _, _, _| 0.0,
            None,
            0.0,
            DriverFlags {
                independent_of_zprime: true,
                nondecreasing_in_yprime: true,
            },
        )
    }

    /// True when `f` ignores every primed argument.
    pub fn is_law_free(&self) -> bool {
        matches!(&self.form, DriverForm::Separable { coupling: None, .. })
    }

    pub fn eval(&self, a: &DriverArgs) -> f64 {
        match &self.form {
            DriverForm::Separable { local, coupling } => {
                local(a.t, a.x, a.y, a.z)
                    + coupling
                        .as_ref()
                        .map_or(0.0, |c| c(a.t, a.x_prime, a.y_prime, a.z_prime))
            }
            DriverForm::General(f) => f(a),
        }
    }

    /// Freeze the law arguments at `law`.
    pub fn averaged_at<'a>(&'a self, t: f64, law: LawSlice<'a>) -> AveragedDriver<'a> {
        match &self.form {
            DriverForm::Separable { local, coupling } => {
                let shift = match coupling {
                    None => 0.0,
                    Some(c) => chunked_mean(law.len(), |j| c(t, law.x(j), law.y[j], law.z(j))),
                };
                AveragedDriver::Local { local, t, shift }
            }
            DriverForm::General(f) => {
                let m = law.len();
                let atoms = self.law_subsample.map_or(m, |k| k.clamp(1, m));
                AveragedDriver::Explicit { f, t, law, atoms }
            }
        }
    }

    /// Random probes of the declared constant and flags. Points are drawn
    /// from `[-radius, radius]`; `n` and `d` size the state and `z` slots.
    pub fn probe(
        &self,
        n: usize,
        d: usize,
        horizon: f64,
        radius: f64,
        probes: usize,
        seed: u64,
    ) -> Result<DriverProbe> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = |len: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..len)
                .map(|_| rng.random_range(-radius..radius))
                .collect()
        };
        let mut lip: f64 = 0.0;
        let mut mono = 0;
        let mut zsens: f64 = 0.0;
        for _ in 0..probes {
            let t = rng.random_range(0.0..=horizon);
            let (xp, x, zp, z) = (
                v(n, &mut rng),
                v(n, &mut rng),
                v(d, &mut rng),
                v(d, &mut rng),
            );
            let (zp2, z2) = (v(d, &mut rng), v(d, &mut rng));
            let yp = rng.random_range(-radius..radius);
            let y = rng.random_range(-radius..radius);
            let yp2 = rng.random_range(-radius..radius);
            let y2 = rng.random_range(-radius..radius);
            let a = DriverArgs {
                t,
                x_prime: &xp,
                x: &x,
                y_prime: yp,
                y,
                z_prime: &zp,
                z: &z,
            };
            let b = DriverArgs {
                y_prime: yp2,
                y: y2,
                z_prime: &zp2,
                z: &z2,
                ..a
            };
            let (fa, fb) = (self.eval(&a), self.eval(&b));
            if !fa.is_finite() || !fb.is_finite() {
                return Err(Error::Hypothesis(
                    "driver returned a non-finite value on a probe".into(),
                ));
            }
            let l1 = |p: &[f64], q: &[f64]| -> f64 {
                p.iter()
                    .zip(q)
                    .map(|(u, w)| (u - w).powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let dist = (yp - yp2).abs() + (y - y2).abs() + l1(&zp, &zp2) + l1(&z, &z2);
            if dist > 1e-12 {
                lip = lip.max((fa - fb).abs() / dist);
            }
            let (lo, hi) = if yp <= yp2 { (yp, yp2) } else { (yp2, yp) };
            let f_lo = self.eval(&DriverArgs { y_prime: lo, ..a });
            let f_hi = self.eval(&DriverArgs { y_prime: hi, ..a });
            if f_lo > f_hi + 1e-12 * (1.0 + f_hi.abs()) {
                mono += 1;
            }
            let fz = self.eval(&DriverArgs { z_prime: &zp2, ..a });
            zsens = zsens.max((fz - fa).abs());
        }
        if lip > self.lipschitz_c * 1.01 + 1e-12 {
            return Err(Error::Hypothesis(format!(
                "driver: sampled Lipschitz quotient {lip:.4} exceeds declared {}",
                self.lipschitz_c
            )));
        }
        if self.flags.nondecreasing_in_yprime && mono > 0 {
            return Err(Error::Hypothesis(format!(
                "driver declared nondecreasing in y' but {mono} of {probes} ordered probes decrease"
            )));
        }
        if self.flags.independent_of_zprime && zsens > 1e-12 {
            return Err(Error::Hypothesis(format!(
                "driver declared independent of z' but moves by {zsens:e} under perturbation"
            )));
        }
        Ok(DriverProbe {
            probes,
            max_lipschitz_quotient: lip,
            monotonicity_violations: mono,
            zprime_sensitivity: zsens,
        })
    }
}

/// Read access to one simulated path for terminal functionals.
pub struct PathView<'a> {
    pub bundle: &'a BrownianBundle,
    pub cloud: &'a ParticleCloud,
    pub path: usize,
}

impl PathView<'_> {
    /// `B_{t_k}` of this path.
    pub fn brownian(&self, k: usize) -> Vec<f64> {
        self.bundle.value(self.path, k)
    }

    pub fn state(&self, k: usize) -> &[f64] {
        self.cloud.state(self.path, k)
    }

    pub fn terminal_state(&self) -> &[f64] {
        self.cloud.state(self.path, self.cloud.grid().n_steps())
    }
}

#[derive(Clone)]
pub struct TerminalFunctional {
    f: Arc<dyn Fn(&PathView) -> f64 + Send + Sync>,
}

impl fmt::Debug for TerminalFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TerminalFunctional")
    }
}

impl TerminalFunctional {
    pub fn new(f: impl Fn(&PathView) -> f64 + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f) }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_| c)
    }

    /// `ξ = g(X_T)`.
    pub fn of_terminal_state(g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(move |p| g(p.terminal_state()))
    }

    /// Pathwise values, with finiteness and a finite second moment checked.
    pub fn evaluate(&self, cloud: &ParticleCloud, bundle: &BrownianBundle) -> Result<Vec<f64>> {
        if cloud.n_paths() != bundle.n_paths() {
            return Err(Error::GridMismatch(format!(
                "cloud has {} paths, bundle {}",
                cloud.n_paths(),
                bundle.n_paths()
            )));
        }
        let v: Vec<f64> = (0..cloud.n_paths())
            .into_par_iter()
            .map(|path| {
                (self.f)(&PathView {
                    bundle,
                    cloud,
                    path,
                })
            })
            .collect();
        if let Some(path) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                stage: "terminal functional",
                path,
                step: cloud.grid().n_steps(),
            });
        }
        let second = chunked_mean(v.len(), |i| v[i] * v[i]);
        if !second.is_finite() {
            return Err(Error::Hypothesis(
                "terminal value has a non-finite sample second moment".into(),
            ));
        }
        Ok(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PicardConfig {
    /// Exponential weight of the norm; `None` takes `16C^2 + 4C + 1`.
    pub beta: Option<f64>,
    /// Relative stopping tolerance on the β-norm gap.
    pub tol: f64,
    pub max_iter: usize,
    pub regression_degree: usize,
    /// Add `(ΔB_j^2/Δt - 1)`-weighted copies of the basis to the Z
    /// regression as zero-mean controls.
    pub z_control_variate: bool,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            beta: None,
            tol: 1e-6,
            max_iter: 50,
            regression_degree: 3,
            z_control_variate: true,
        }
    }
}

pub fn contraction_beta(c: f64) -> f64 {
    16.0 * c * c + 4.0 * c + 1.0
}

impl PicardConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = self.beta {
            if !(b > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "beta must be positive, got {b}"
                )));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        Ok(())
    }

    pub fn beta_for(&self, lipschitz_c: f64) -> f64 {
        self.beta.unwrap_or_else(|| contraction_beta(lipschitz_c))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PicardRecord {
    pub iteration: usize,
    pub gap_beta_norm: f64,
    pub ratio: Option<f64>,
}

/// Discrete solution `(Y, Z)` on the grid, stored time-major.
#[derive(Clone, Debug)]
pub struct BsdePair {
    grid: TimeGrid,
    n_paths: usize,
    d: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    /// `E_k[Y_{k+1}]`, the `y` at which the explicit driver was evaluated.
    y_hat: Vec<f64>,
    pub diagnostics: Vec<PicardRecord>,
    pub beta: f64,
    pub regression_degree: usize,
}

impl BsdePair {
    fn zeros(grid: TimeGrid, n_paths: usize, d: usize, degree: usize) -> Self {
        Self {
            grid,
            n_paths,
            d,
            y: vec![0.0; grid.n_nodes() * n_paths],
            z: vec![0.0; grid.n_nodes() * n_paths * d],
            y_hat: vec![0.0; grid.n_nodes() * n_paths],
            diagnostics: Vec::new(),
            beta: 0.0,
            regression_degree: degree,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn z_dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn y(&self, path: usize, k: usize) -> f64 {
        self.y[k * self.n_paths + path]
    }

    /// Conditional mean `E_k[Y_{k+1}]`; equals `Y_T` at the terminal node.
    #[inline]
    pub fn y_hat(&self, path: usize, k: usize) -> f64 {
        self.y_hat[k * self.n_paths + path]
    }

    #[inline]
    pub fn z(&self, path: usize, k: usize) -> &[f64] {
        let o = (k * self.n_paths + path) * self.d;
        &self.z[o..o + self.d]
    }

    pub fn y_slice(&self, k: usize) -> &[f64] {
        &self.y[k * self.n_paths..(k + 1) * self.n_paths]
    }

    pub fn z_slice(&self, k: usize) -> &[f64] {
        let w = self.n_paths * self.d;
        &self.z[k * w..(k + 1) * w]
    }

    pub fn mean_y(&self, k: usize) -> f64 {
        let s = self.y_slice(k);
        chunked_mean(s.len(), |i| s[i])
    }

    pub fn mean_z(&self, k: usize) -> Vec<f64> {
        let s = self.z_slice(k);
        let d = self.d;
        (0..d)
            .map(|c| chunked_mean(self.n_paths, |i| s[i * d + c]))
            .collect()
    }

    pub fn iterations(&self) -> usize {
        self.diagnostics.len()
    }

    /// Joint law of `(X, Y, Z)` at grid index `k`.
    pub fn law_slice<'a>(&'a self, cloud: &'a ParticleCloud, k: usize) -> LawSlice<'a> {
        LawSlice {
            x: cloud.slice(k),
            y: self.y_slice(k),
            z: self.z_slice(k),
            n: cloud.dim(),
            d: self.d,
        }
    }
}

/// Discrete `‖(Y, Z)‖_β^2 = (1/M) Σ_i Σ_{k<K} e^{β(t_k - T)} (|Y|^2 + |Z|^2) Δt`.
/// The factor `e^{-βT}` keeps the numbers finite and cancels in every ratio.
pub fn beta_norm_sq(a: &BsdePair, b: Option<&BsdePair>, beta: f64) -> f64 {
    let g = a.grid;
    let m = a.n_paths;
    let d = a.d;
    let mut total = 0.0;
    for k in 0..g.n_steps() {
        let w = (beta * (g.node(k) - g.t1())).exp() * g.dt();
        let s = chunked_sum(m, |i| {
            let dy = a.y(i, k) - b.map_or(0.0, |b| b.y(i, k));
            let za = a.z(i, k);
            let mut v = dy * dy;
            for c in 0..d {
                let dz = za[c] - b.map_or(0.0, |b| b.z(i, k)[c]);
                v += dz * dz;
            }
            v
        });
        total += w * s / m as f64;
    }
    total
}

/// Backward sweep engine: regressions on the forward states are built once
/// and reused by every sweep (Picard iterations only change the regressands).
pub struct BackwardSolver<'a> {
    cloud: &'a ParticleCloud,
    bundle: &'a BrownianBundle,
    regressors: Vec<Regressor>,
    controlled: Option<Vec<ControlledProjector>>,
    degree: usize,
}

/// Driver of one backward sweep at `(k, path)` as a function of `(x, y, z)`.
pub trait StepDriver: Sync {
    fn eval(&self, k: usize, path: usize, x: &[f64], y: f64, z: &[f64]) -> f64;
}

impl<F> StepDriver for F
where
    F: Fn(usize, usize, &[f64], f64, &[f64]) -> f64 + Sync,
{
    fn eval(&self, k: usize, path: usize, x: &[f64], y: f64, z: &[f64]) -> f64 {
        self(k, path, x, y, z)
    }
}

impl<'a> BackwardSolver<'a> {
    pub fn new(
        cloud: &'a ParticleCloud,
        bundle: &'a BrownianBundle,
        config: &PicardConfig,
    ) -> Result<Self> {
        let degree = config.regression_degree;
        if cloud.grid() != bundle.grid() {
            return Err(Error::GridMismatch(
                "forward cloud and Brownian bundle live on different grids".into(),
            ));
        }
        if cloud.n_paths() != bundle.n_paths() {
            return Err(Error::GridMismatch(format!(
                "cloud has {} paths, bundle {}",
                cloud.n_paths(),
                bundle.n_paths()
            )));
        }
        let n = cloud.dim();
        let regressors = (0..cloud.grid().n_steps())
            .map(|k| Regressor::fit(cloud.slice(k), n, degree, k))
            .collect::<Result<Vec<_>>>()?;
        let controlled = if config.z_control_variate {
            Some(
                (0..cloud.grid().n_steps())
                    .map(|k| {
                        let c = Self::controls(bundle, k);
                        ControlledProjector::fit(
                            &regressors[k],
                            cloud.slice(k),
                            &c,
                            bundle.dim(),
                            k,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self {
            cloud,
            bundle,
            regressors,
            controlled,
            degree,
        })
    }

    fn controls(bundle: &BrownianBundle, k: usize) -> Vec<f64> {
        let dt = bundle.grid().dt();
        (0..bundle.n_paths())
            .flat_map(|i| {
                bundle
                    .increment(i, k)
                    .iter()
                    .map(move |db| db * db / dt - 1.0)
            })
            .collect()
    }

    pub fn grid(&self) -> &TimeGrid {
        self.cloud.grid()
    }

    pub fn cloud(&self) -> &ParticleCloud {
        self.cloud
    }

    pub fn bundle(&self) -> &BrownianBundle {
        self.bundle
    }

    /// One backward sweep from `terminal` with driver `g`.
    pub fn sweep<G: StepDriver + ?Sized>(&self, g: &G, terminal: &[f64]) -> Result<BsdePair> {
        let grid = *self.cloud.grid();
        let m = self.cloud.n_paths();
        let n = self.cloud.dim();
        let d = self.bundle.dim();
        if terminal.len() != m {
            return Err(Error::InvalidArgument(format!(
                "terminal has {} values for {m} paths",
                terminal.len()
            )));
        }
        let dt = grid.dt();
        let kk = grid.n_steps();
        let mut pair = BsdePair::zeros(grid, m, d, self.degree);
        pair.y[kk * m..].copy_from_slice(terminal);
        pair.y_hat[kk * m..].copy_from_slice(terminal);
        for k in (0..kk).rev() {
            let reg = &self.regressors[k];
            let states = self.cloud.slice(k);
            let (head, tail) = pair.y.split_at_mut((k + 1) * m);
            let ynext = &tail[..m];
            let ycur = &mut head[k * m..];
            let zcur = &mut pair.z[k * m * d..(k + 1) * m * d];
            let constant = ynext.iter().all(|v| v.to_bits() == ynext[0].to_bits());
            let yhat: Vec<f64> = if constant {
                vec![ynext[0]; m]
            } else {
                let coef = reg.project(states, 1, |i, o| o[0] = ynext[i]);
                let p = reg.n_terms();
                (0..m)
                    .into_par_iter()
                    .map_init(
                        || vec![0.0; p],
                        |s, i| reg.eval(&coef[0], &states[i * n..(i + 1) * n], s),
                    )
                    .collect()
            };
            if !constant {
                let target = |i: usize, o: &mut [f64]| {
                    let r = (ynext[i] - yhat[i]) / dt;
                    for (c, db) in self.bundle.increment(i, k).iter().enumerate() {
                        o[c] = r * db;
                    }
                };
                let coef = match &self.controlled {
                    Some(cps) => {
                        let controls = Self::controls(self.bundle, k);
                        cps[k].project(reg, states, &controls, d, target)
                    }
                    None => reg.project(states, d, target),
                };
                let p = reg.n_terms();
                zcur.par_chunks_mut(d).enumerate().for_each_init(
                    || vec![0.0; p],
                    |s, (i, zi)| {
                        let x = &states[i * n..(i + 1) * n];
                        for c in 0..d {
                            zi[c] = reg.eval(&coef[c], x, s);
                        }
                    },
                );
            }
            let zc: &[f64] = zcur;
            ycur.par_iter_mut().enumerate().for_each(|(i, yi)| {
                let x = &states[i * n..(i + 1) * n];
                let z = &zc[i * d..(i + 1) * d];
                *yi = yhat[i] + g.eval(k, i, x, yhat[i], z) * dt;
            });
            pair.y_hat[k * m..(k + 1) * m].copy_from_slice(&yhat);
            let bad_y = ycur.iter().position(|v| !v.is_finite());
            let bad_z = zc.iter().position(|v| !v.is_finite()).map(|p| p / d);
            if let Some(path) = bad_y.or(bad_z) {
                return Err(Error::NonFinite {
                    stage: "backward regression step",
                    path,
                    step: k,
                });
            }
        }
        Ok(pair)
    }
}

/// Classical BSDE with driver `g(t, x, y, z)` and pathwise terminal values.
pub fn solve_classical_bsde<G>(
    g: G,
    terminal: &[f64],
    cloud: &ParticleCloud,
    bundle: &BrownianBundle,
    config: &PicardConfig,
) -> Result<BsdePair>
where
    G: Fn(f64, &[f64], f64, &[f64]) -> f64 + Sync,
{
    config.validate()?;
    let solver = BackwardSolver::new(cloud, bundle, config)?;
    let grid = *cloud.grid();
    solver.sweep(
        &|k: usize, _: usize, x: &[f64], y: f64, z: &[f64]| g(grid.node(k), x, y, z),
        terminal,
    )
}

/// Where the frozen law arguments of a Picard sweep come from.
pub enum LawSource<'c> {
    /// `X'` from the cloud, `(Y', Z')` from the previous iterate: the plain
    /// mean-field BSDE.
    OwnIterate(&'c ParticleCloud),
    /// A law fixed in advance (one slice per time step), e.g. a frozen
    /// background solution. The Picard map is then constant.
    Fixed(Vec<LawSlice<'c>>),
}

/// Picard iteration on a prepared solver.
pub fn picard(
    solver: &BackwardSolver<'_>,
    driver: &Driver,
    terminal: &[f64],
    config: &PicardConfig,
    source: &LawSource<'_>,
) -> Result<BsdePair> {
    config.validate()?;
    let beta = config.beta_for(driver.lipschitz_c);
    let grid = *solver.grid();
    let m = solver.cloud().n_paths();
    let d = solver.bundle().dim();
    let mut prev = BsdePair::zeros(grid, m, d, config.regression_degree);
    let mut history: Vec<f64> = Vec::new();
    let mut records = Vec::new();
    for iteration in 1..=config.max_iter {
        let averaged: Vec<AveragedDriver> = (0..grid.n_steps())
            .map(|k| {
                let law = match source {
                    LawSource::OwnIterate(cloud) => prev.law_slice(cloud, k),
                    LawSource::Fixed(slices) => slices[k],
                };
                driver.averaged_at(grid.node(k), law)
            })
            .collect();
        let g = |k: usize, _: usize, x: &[f64], y: f64, z: &[f64]| averaged[k].eval(x, y, z);
        let mut next = solver.sweep(&g, terminal)?;
        drop(averaged);
        let gap = beta_norm_sq(&next, Some(&prev), beta).sqrt();
        let norm = beta_norm_sq(&next, None, beta).sqrt();
        let ratio = history.last().map(|&h| if h > 0.0 { gap / h } else { 0.0 });
        history.push(gap);
        records.push(PicardRecord {
            iteration,
            gap_beta_norm: gap,
            ratio,
        });
        // The β-weight all but hides early nodes, so also ask for the
        // unweighted per-node gap to be small.
        let converged =
            (gap <= config.tol * norm && node_gap_small(&next, &prev, config.tol)) || gap == 0.0;
        let constant_map = driver.is_law_free() || matches!(source, LawSource::Fixed(_));
        if converged || constant_map {
            if constant_map && !converged {
                // The Picard map is constant: the next iterate is this one.
                records.push(PicardRecord {
                    iteration: iteration + 1,
                    gap_beta_norm: 0.0,
                    ratio: Some(0.0),
                });
            }
            next.diagnostics = records;
            next.beta = beta;
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::PicardNotConverged {
        tol: config.tol,
        max_iter: config.max_iter,
        last_gap: history.last().copied().unwrap_or(f64::NAN),
        history,
    })
}

/// Largest per-node RMS change of Y, relative to the largest per-node RMS of Y.
fn node_gap_small(next: &BsdePair, prev: &BsdePair, tol: f64) -> bool {
    let n = next.grid.n_nodes();
    let m = next.n_paths as f64;
    let mut worst_gap = 0.0f64;
    let mut scale = 0.0f64;
    for k in 0..n {
        let a = next.y_slice(k);
        let b = prev.y_slice(k);
        let g = (chunked_sum(a.len(), |i| (a[i] - b[i]).powi(2)) / m).sqrt();
        let s = (chunked_sum(a.len(), |i| a[i] * a[i]) / m).sqrt();
        worst_gap = worst_gap.max(g);
        scale = scale.max(s);
    }
    worst_gap <= tol * scale || worst_gap == 0.0
}

/// Mean-field BSDE `Y_t = ξ + ∫ E'[f(s, X', X, Y', Y, Z', Z)] ds - ∫ Z dB`.
pub fn solve_meanfield_bsde(
    driver: &Driver,
    terminal: &[f64],
    cloud: &ParticleCloud,
    bundle: &BrownianBundle,
    config: &PicardConfig,
) -> Result<BsdePair> {
    config.validate()?;
    let solver = BackwardSolver::new(cloud, bundle, config)?;
    picard(
        &solver,
        driver,
        terminal,
        config,
        &LawSource::OwnIterate(cloud),
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct ContractionReport {
    pub gaps: Vec<f64>,
    pub ratios: Vec<f64>,
    pub bound: f64,
    pub slack: f64,
    pub all_within: bool,
    pub immediate_convergence: bool,
    /// At least three iterations were recorded, so the ratios say something.
    pub sufficient: bool,
    pub monotone_after_second: bool,
}

/// Successive gap ratios against `1/√2 + slack`.
pub fn contraction_report(records: &[PicardRecord], slack: f64) -> ContractionReport {
    let gaps: Vec<f64> = records.iter().map(|r| r.gap_beta_norm).collect();
    let ratios: Vec<f64> = records.iter().filter_map(|r| r.ratio).collect();
    let bound = std::f64::consts::FRAC_1_SQRT_2;
    let immediate = gaps.len() >= 2 && gaps[1] == 0.0;
    let all_within = ratios.iter().all(|r| *r <= bound + slack);
    // Ratios from iteration 2 on are the entries of `ratios` starting at 1.
    let monotone = ratios
        .windows(2)
        .skip(1)
        .all(|w| w[1] <= w[0] * 1.10 + 1e-12);
    ContractionReport {
        gaps,
        ratios,
        bound,
        slack,
        all_within,
        immediate_convergence: immediate,
        sufficient: records.len() >= 3 || immediate,
        monotone_after_second: monotone,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityReport {
    pub beta: f64,
    pub times: Vec<f64>,
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub tol: f64,
    pub pass: bool,
    pub worst_ratio: f64,
}

/// Both sides of the a priori estimate
/// `E|ΔY_t|^2 + ½ E∫_t^T e^{β(s-t)}(|ΔY|^2+|ΔZ|^2) ds
///     <= E[e^{β(T-t)}|Δξ|^2] + E∫_t^T e^{β(s-t)}|Δφ|^2 ds`
/// with `β = 16(1 + C^2)`, at every grid node. `phi1`/`phi2` are the driver
/// perturbations, time-major `[node][path]` (the last node is unused).
pub fn stability_gap(
    p1: &BsdePair,
    p2: &BsdePair,
    phi1: &[f64],
    phi2: &[f64],
    lipschitz_c: f64,
    tol: f64,
) -> Result<StabilityReport> {
    if p1.grid != p2.grid || p1.n_paths != p2.n_paths || p1.d != p2.d {
        return Err(Error::GridMismatch(
            "stability comparison needs both solutions on one grid and path set".into(),
        ));
    }
    let g = p1.grid;
    let m = p1.n_paths;
    let kk = g.n_steps();
    if phi1.len() != g.n_nodes() * m || phi2.len() != phi1.len() {
        return Err(Error::GridMismatch(
            "perturbation arrays do not match the grid".into(),
        ));
    }
    let beta = 16.0 * (1.0 + lipschitz_c * lipschitz_c);
    let dt = g.dt();
    let dy2: Vec<f64> = (0..=kk)
        .map(|k| chunked_mean(m, |i| (p1.y(i, k) - p2.y(i, k)).powi(2)))
        .collect();
    let dz2: Vec<f64> = (0..=kk)
        .map(|k| {
            chunked_mean(m, |i| {
                p1.z(i, k)
                    .iter()
                    .zip(p2.z(i, k))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum()
            })
        })
        .collect();
    let dphi2: Vec<f64> = (0..kk)
        .map(|k| chunked_mean(m, |i| (phi1[k * m + i] - phi2[k * m + i]).powi(2)))
        .collect();
    let mut lhs = Vec::with_capacity(kk + 1);
    let mut rhs = Vec::with_capacity(kk + 1);
    let mut worst: f64 = 0.0;
    let mut pass = true;
    for k in 0..=kk {
        let tk = g.node(k);
        let mut l = dy2[k];
        let mut r = (beta * (g.t1() - tk)).exp() * dy2[kk];
        for j in k..kk {
            let w = (beta * (g.node(j) - tk)).exp() * dt;
            l += 0.5 * w * (dy2[j] + dz2[j]);
            r += w * dphi2[j];
        }
        if l > r * (1.0 + tol) + 1e-300 {
            pass = false;
        }
        if r > 0.0 {
            worst = worst.max(l / r);
        } else if l > 0.0 {
            worst = f64::INFINITY;
        }
        lhs.push(l);
        rhs.push(r);
    }
    Ok(StabilityReport {
        beta,
        times: g.nodes(),
        lhs,
        rhs,
        tol,
        pass,
        worst_ratio: worst,
    })
}
