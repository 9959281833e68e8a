//! One-dimensional explicit finite differences for the nonlocal PDE solved by
//! the value function, its cross-check against the probabilistic surface, the
//! exponential transform, the `χ` supersolution certificate and the growth
//! boundary of the log-quadratic class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bsde::{DriverArgs, LawSlice};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::markov::{interp_linear, MarkovProblem, MeanFieldBackground, Provenance, ValueSurface};

pub const CFL_SAFETY: f64 = 0.9;

/// Averaged coefficients `(b̃, σ̃)` at background node `k` and point `x`.
fn averaged_coefficients(problem: &MarkovProblem, bg: &MeanFieldBackground, k: usize, x: f64) -> Result<(f64, f64)> {
    let atoms = bg.law.atoms_at(k)?;
    let mean = bg.law.mean_at(k)?;
    let mut b = [0.0];
    let mut s = [0.0];
    let mut sb = [0.0];
    let mut ss = [0.0];
    problem
        .forward
        .averaged(bg.grid().node(k), atoms, mean, &[x], &mut b, &mut s, &mut sb, &mut ss);
    Ok((b[0], s[0]))
}

fn require_scalar(problem: &MarkovProblem) -> Result<()> {
    if problem.forward.n != 1 || problem.forward.d != 1 {
        return Err(Error::InvalidArgument(format!(
            "finite differences are one-dimensional; problem has n = {}, d = {}",
            problem.forward.n, problem.forward.d
        )));
    }
    Ok(())
}

/// Uniform space nodes and a time grid that refines the background grid.
#[derive(Clone, Debug, Serialize)]
pub struct PdeGrid1D {
    pub xs: Vec<f64>,
    pub dx: f64,
    pub time: TimeGrid,
    /// PDE steps per background step.
    pub refine: usize,
    /// `Δt · max σ̃² / Δx²`.
    pub cfl_ratio: f64,
}

impl PdeGrid1D {
    /// Smallest refinement of the background grid meeting the CFL bound.
    pub fn new(
        problem: &MarkovProblem,
        bg: &MeanFieldBackground,
        x_min: f64,
        x_max: f64,
        n_x: usize,
    ) -> Result<Self> {
        let s2 = max_sigma_sq(problem, bg, x_min, x_max, n_x)?;
        let dx = (x_max - x_min) / (n_x - 1) as f64;
        let bound = CFL_SAFETY * dx * dx / s2.max(f64::MIN_POSITIVE);
        let refine = ((bg.grid().dt() / bound).ceil() as usize).max(1);
        Self::with_refine(problem, bg, x_min, x_max, n_x, refine)
    }

    /// Explicit refinement; rejected when the CFL bound fails.
    pub fn with_refine(
        problem: &MarkovProblem,
        bg: &MeanFieldBackground,
        x_min: f64,
        x_max: f64,
        n_x: usize,
        refine: usize,
    ) -> Result<Self> {
        require_scalar(problem)?;
        if n_x < 5 || !(x_max > x_min) {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 interior nodes on a nonempty interval, got {n_x} on [{x_min}, {x_max}]"
            )));
        }
        if refine == 0 {
            return Err(Error::InvalidGrid("refinement must be at least 1".into()));
        }
        let dx = (x_max - x_min) / (n_x - 1) as f64;
        let xs = (0..n_x).map(|j| x_min + dx * j as f64).collect();
        let time = bg.grid().refined(refine)?;
        let s2 = max_sigma_sq(problem, bg, x_min, x_max, n_x)?;
        let bound = CFL_SAFETY * dx * dx / s2.max(f64::MIN_POSITIVE);
        if time.dt() > bound * (1.0 + 1e-12) {
            return Err(Error::Cfl {
                dt: time.dt(),
                bound,
            });
        }
        Ok(Self {
            xs,
            dx,
            time,
            refine,
            cfl_ratio: time.dt() * s2 / (dx * dx),
        })
    }
}

fn max_sigma_sq(problem: &MarkovProblem, bg: &MeanFieldBackground, x_min: f64, x_max: f64, n_x: usize) -> Result<f64> {
    require_scalar(problem)?;
    let dx = (x_max - x_min) / (n_x.max(2) - 1) as f64;
    let mut s2 = 0.0f64;
    for k in 0..bg.grid().n_nodes() {
        for j in 0..n_x {
            let (_, s) = averaged_coefficients(problem, bg, k, x_min + dx * j as f64)?;
            s2 = s2.max(s * s);
        }
    }
    Ok(s2)
}

#[derive(Clone, Debug, Serialize)]
pub struct PdeDiagnostics {
    pub refine: usize,
    pub dt: f64,
    pub dx: f64,
    pub cfl_ratio: f64,
    /// Largest number of law atoms outside `[x_min, x_max]` at any step; those
    /// read `u` by linear extrapolation.
    pub extrapolated_atoms: usize,
}

#[derive(Clone, Debug)]
pub struct PdeSolution {
    /// `u` on the background time nodes.
    pub surface: ValueSurface,
    pub diagnostics: PdeDiagnostics,
}

/// Backward explicit scheme from the terminal slice `E'[Φ(X_T', x_j)]`.
/// Boundary nodes are extrapolated linearly from the interior.
pub fn solve_nonlocal_pde_1d(
    problem: &MarkovProblem,
    bg: &MeanFieldBackground,
    grid: &PdeGrid1D,
) -> Result<PdeSolution> {
    require_scalar(problem)?;
    let nx = grid.xs.len();
    let (dx, dt) = (grid.dx, grid.time.dt());
    let n_fine = grid.time.n_steps();
    let kk = bg.grid().n_steps();
    if n_fine != kk * grid.refine || (grid.time.t1() - bg.grid().t1()).abs() > 1e-12 {
        return Err(Error::GridMismatch(
            "PDE time grid does not refine the background grid".into(),
        ));
    }
    let terminal_atoms = bg.law.atoms_at(kk)?;
    let mut u: Vec<f64> = grid
        .xs
        .par_iter()
        .map(|&x| problem.phi.averaged(terminal_atoms, 1, &[x]))
        .collect();
    let mut slices = vec![Vec::new(); kk + 1];
    slices[kk] = u.clone();
    let m = bg.law.n_atoms();
    let zeros = vec![0.0; m];
    let mut extrapolated_atoms = 0usize;
    let coeffs: Vec<Vec<(f64, f64)>> = (0..kk)
        .map(|k| {
            grid.xs
                .iter()
                .map(|&x| averaged_coefficients(problem, bg, k, x))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    for j in (0..n_fine).rev() {
        let k = j / grid.refine;
        let t = grid.time.node(j);
        let atoms = bg.law.atoms_at(k)?;
        let mut outside = 0usize;
        let u_atoms: Vec<f64> = atoms
            .iter()
            .map(|&a| {
                let r = interp_linear(&grid.xs, &u, a);
                outside += r.extrapolated as usize;
                r.value
            })
            .collect();
        extrapolated_atoms = extrapolated_atoms.max(outside);
        let law = LawSlice {
            x: atoms,
            y: &u_atoms,
            z: &zeros,
            n: 1,
            d: 1,
        };
        let f = problem.driver.averaged_at(t, law);
        let cf = &coeffs[k];
        let prev = &u;
        let mut next: Vec<f64> = (0..nx)
            .into_par_iter()
            .map(|i| {
                if i == 0 || i == nx - 1 {
                    return 0.0;
                }
                let (b, s) = cf[i];
                let du = (prev[i + 1] - prev[i - 1]) / (2.0 * dx);
                let d2u = (prev[i + 1] - 2.0 * prev[i] + prev[i - 1]) / (dx * dx);
                let src = f.eval(&[grid.xs[i]], prev[i], &[du * s]);
                prev[i] + dt * (0.5 * s * s * d2u + b * du + src)
            })
            .collect();
        next[0] = 2.0 * next[1] - next[2];
        next[nx - 1] = 2.0 * next[nx - 2] - next[nx - 3];
        if let Some(p) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "finite-difference step",
                path: p,
                step: j,
            });
        }
        u = next;
        if j % grid.refine == 0 {
            slices[k] = u.clone();
        }
    }
    let times = bg.grid().nodes();
    let values: Vec<f64> = slices.concat();
    let n = values.len();
    let surface = ValueSurface::new(times, grid.xs.clone(), values, vec![0.0; n], Provenance::Pde)?;
    Ok(PdeSolution {
        surface,
        diagnostics: PdeDiagnostics {
            refine: grid.refine,
            dt,
            dx,
            cfl_ratio: grid.cfl_ratio,
            extrapolated_atoms,
        },
    })
}

/// Largest change on `footprint` when the domain is doubled around its
/// center at the same `Δx`. Both solves use the finer of the two CFL
/// refinements, which is returned with the influence.
pub fn boundary_influence(
    problem: &MarkovProblem,
    bg: &MeanFieldBackground,
    grid: &PdeGrid1D,
    footprint: &ValueSurface,
) -> Result<(f64, usize)> {
    let nx = grid.xs.len();
    let (lo, hi) = (grid.xs[0], grid.xs[nx - 1]);
    let half = 0.5 * (hi - lo);
    let wide = PdeGrid1D::new(problem, bg, lo - half, hi + half, 2 * nx - 1)?;
    let refine = wide.refine.max(grid.refine);
    let narrow = PdeGrid1D::with_refine(problem, bg, lo, hi, nx, refine)?;
    let wide = PdeGrid1D::with_refine(problem, bg, lo - half, hi + half, 2 * nx - 1, refine)?;
    let a = solve_nonlocal_pde_1d(problem, bg, &narrow)?.surface;
    let b = solve_nonlocal_pde_1d(problem, bg, &wide)?.surface;
    let a = a.restrict(&footprint.times, &footprint.xs)?;
    let b = b.restrict(&footprint.times, &footprint.xs)?;
    let d = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    Ok((d, refine))
}

/// PDE grid around `footprint` at spacing `dx`, widened by doubling until the
/// boundary influence on the footprint is below `tolerance / 2`. Returns the
/// grid and the last measured influence.
pub fn pde_grid_for(
    problem: &MarkovProblem,
    bg: &MeanFieldBackground,
    footprint: &ValueSurface,
    dx: f64,
    tolerance: f64,
    max_doublings: usize,
) -> Result<(PdeGrid1D, f64)> {
    let lo = footprint.xs[0];
    let hi = footprint.xs[footprint.n_space() - 1];
    let center = 0.5 * (lo + hi);
    let mut cells = (((hi - lo) / dx).round() as usize).max(4);
    let mut last = f64::INFINITY;
    for _ in 0..=max_doublings {
        cells *= 2;
        let half = 0.5 * cells as f64 * dx;
        let (x_min, x_max) = (center - half, center + half);
        let grid = PdeGrid1D::new(problem, bg, x_min, x_max, cells + 1)?;
        let (d, refine) = boundary_influence(problem, bg, &grid, footprint)?;
        last = d;
        if last <= 0.5 * tolerance {
            let grid = PdeGrid1D::with_refine(problem, bg, x_min, x_max, cells + 1, refine)?;
            return Ok((grid, last));
        }
    }
    Err(Error::InvalidGrid(format!(
        "boundary influence {last:.3e} still above {:.3e} after {max_doublings} doublings",
        0.5 * tolerance
    )))
}

#[derive(Clone, Debug, Serialize)]
pub struct CrosscheckReport {
    pub max_interior: f64,
    pub rms_interior: f64,
    /// Largest interior discrepancy per time node, earliest first.
    pub max_by_time: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
    pub note: &'static str,
}

/// Compare a probabilistic surface with a PDE surface on the probabilistic
/// footprint. The PDE surface must contain every node of the footprint.
/// Interior means every time node and all but the two end space nodes.
pub fn viscosity_crosscheck(
    prob: &ValueSurface,
    pde: &ValueSurface,
    tolerance: f64,
) -> Result<CrosscheckReport> {
    let pde = pde.restrict(&prob.times, &prob.xs)?;
    let w = prob.n_space();
    if w < 3 {
        return Err(Error::GridMismatch("footprint has no interior space nodes".into()));
    }
    let mut max_by_time = Vec::with_capacity(prob.n_times());
    let mut sq = 0.0;
    let mut count = 0usize;
    for ti in 0..prob.n_times() {
        let mut worst = 0.0f64;
        for j in 1..w - 1 {
            let d = (prob.value(ti, j) - pde.value(ti, j)).abs();
            worst = worst.max(d);
            sq += d * d;
            count += 1;
        }
        max_by_time.push(worst);
    }
    let max_interior = max_by_time.iter().copied().fold(0.0, f64::max);
    Ok(CrosscheckReport {
        max_interior,
        rms_interior: (sq / count as f64).sqrt(),
        max_by_time,
        tolerance,
        pass: max_interior <= tolerance,
        note: "agreement of two solvers plus scheme consistency; viscosity status itself is not certified",
    })
}

/// `f̄(t, x', x, y', y, z) = e^{νt} f(t, x', x, e^{-νt} y', e^{-νt} y, e^{-νt} z) - ν y`.
#[derive(Clone, Debug, Serialize)]
pub struct TransformedDriver {
    pub nu: f64,
    pub lipschitz_k: f64,
}

impl TransformedDriver {
    pub fn eval(&self, problem: &MarkovProblem, a: &DriverArgs) -> f64 {
        let e = (-self.nu * a.t).exp();
        let z: Vec<f64> = a.z.iter().map(|v| v * e).collect();
        let inner = DriverArgs {
            y_prime: a.y_prime * e,
            y: a.y * e,
            z: &z,
            ..*a
        };
        problem.driver.eval(&inner) / e - self.nu * a.y
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MonotoneProbe {
    pub probes: usize,
    /// Largest `(f̄(y1) - f̄(y2)) / (y1 - y2)` seen.
    pub max_slope: f64,
    /// `-(ν - K)`.
    pub bound: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct ExpTransform {
    pub surface: ValueSurface,
    pub driver: TransformedDriver,
    pub probe: MonotoneProbe,
}

/// `ū(t, x) = u(t, x) e^{νt}` pointwise, any sign of `ν`.
pub fn scale_surface(surface: &ValueSurface, nu: f64) -> Result<ValueSurface> {
    let w = surface.n_space();
    let f = |p: usize| (nu * surface.times[p / w]).exp();
    ValueSurface::new(
        surface.times.clone(),
        surface.xs.clone(),
        surface.values.iter().enumerate().map(|(p, v)| v * f(p)).collect(),
        surface.std_errors.iter().enumerate().map(|(p, v)| v * f(p)).collect(),
        surface.provenance,
    )
}

/// Exponential transform with `ν > K`, plus a random probe of the strict
/// monotonicity of `f̄` in `y`.
pub fn exp_transform(
    problem: &MarkovProblem,
    surface: &ValueSurface,
    nu: f64,
    probes: usize,
    seed: u64,
) -> Result<ExpTransform> {
    let k = problem.driver.lipschitz_c;
    if !(nu > k) {
        return Err(Error::InvalidArgument(format!(
            "exponential transform needs nu > K = {k}, got {nu}"
        )));
    }
    let driver = TransformedDriver { nu, lipschitz_k: k };
    let (n, d) = (problem.forward.n, problem.forward.d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_slope = f64::NEG_INFINITY;
    let draw = |rng: &mut ChaCha8Rng, len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-3.0..3.0)).collect()
    };
    for _ in 0..probes {
        let t = rng.random_range(0.0..=problem.horizon);
        let xp = draw(&mut rng, n);
        let x = draw(&mut rng, n);
        let z = draw(&mut rng, d);
        let zp = vec![0.0; d];
        let yp = rng.random_range(-3.0..3.0);
        let a = rng.random_range(-3.0..3.0f64);
        let b = rng.random_range(-3.0..3.0f64);
        let (y1, y2) = (a.max(b), a.min(b));
        if y1 - y2 < 1e-9 {
            continue;
        }
        let args = |y: f64| DriverArgs {
            t,
            x_prime: &xp,
            x: &x,
            y_prime: yp,
            y,
            z_prime: &zp,
            z: &z,
        };
        let s = (driver.eval(problem, &args(y1)) - driver.eval(problem, &args(y2))) / (y1 - y2);
        max_slope = max_slope.max(s);
    }
    let bound = -(nu - k);
    Ok(ExpTransform {
        surface: scale_surface(surface, nu)?,
        driver,
        probe: MonotoneProbe {
            probes,
            max_slope,
            bound,
            pass: max_slope <= bound + 1e-9 * (1.0 + bound.abs()),
        },
    })
}

/// Inputs of the `χ` certificate.
#[derive(Clone, Debug, Serialize)]
pub struct ChiParams {
    pub a: f64,
    pub p: f64,
    pub k: f64,
    /// Lattice: this many time nodes of the background grid (evenly picked).
    pub lattice_times: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub lattice_x: usize,
    /// Use this `C₁` instead of the formula (for sanity inversions).
    pub c1_override: Option<f64>,
    pub inflation: f64,
}

impl Default for ChiParams {
    fn default() -> Self {
        Self {
            a: 2.0,
            p: 2.0,
            k: 1.0,
            lattice_times: 11,
            x_min: -5.0,
            x_max: 5.0,
            lattice_x: 41,
            c1_override: None,
            inflation: 1.2,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ChiPoint {
    pub t: f64,
    pub x: f64,
    pub lhs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ChiCertificate {
    pub a: f64,
    pub c1: f64,
    pub p: f64,
    pub k: f64,
    pub c: f64,
    pub c_p_est: f64,
    pub points: Vec<ChiPoint>,
    pub min_lhs: f64,
    pub max_lhs: f64,
    pub pass: bool,
    pub diagnostic: Option<String>,
}

fn psi(p: f64, x: f64) -> (f64, f64, f64) {
    let q = 1.0 + x * x;
    let v = q.powf(0.5 * p);
    let d1 = p * x * q.powf(0.5 * p - 1.0);
    let d2 = p * q.powf(0.5 * p - 2.0) * (1.0 + (p - 1.0) * x * x);
    (v, d1, d2)
}

/// Evaluate the supersolution inequality for
/// `χ(t, x) = A e^{C₁(T - t)} ψ(x)`, `ψ(x) = (1 + x²)^{p/2}`, on a lattice.
///
/// `C_p` is the empirical `sup_t E[ψ(X_t)]` divided by `inf ψ = 1`, so that
/// `E[ψ(X_t)] ≤ C_p ψ(x)` holds for every `x`; it is inflated by
/// `params.inflation` unless the law is a point mass.
pub fn chi_supersolution_check(
    problem: &MarkovProblem,
    bg: &MeanFieldBackground,
    params: &ChiParams,
) -> Result<ChiCertificate> {
    require_scalar(problem)?;
    if !(params.a > 1.0) || !(params.p > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "certificate needs A > 1 and p > 1, got A = {}, p = {}",
            params.a, params.p
        )));
    }
    if params.lattice_times < 2 || params.lattice_x < 2 {
        return Err(Error::InvalidArgument("lattice needs at least 2 x 2 points".into()));
    }
    let g = *bg.grid();
    let kk = g.n_steps();
    let p = params.p;
    let mut e_psi = Vec::with_capacity(kk + 1);
    let mut degenerate = true;
    for k in 0..=kk {
        let atoms = bg.law.atoms_at(k)?;
        degenerate &= atoms.iter().all(|&a| a.to_bits() == atoms[0].to_bits());
        let m = atoms.iter().map(|&a| psi(p, a).0).sum::<f64>() / atoms.len() as f64;
        e_psi.push(m);
    }
    let c = problem.forward.lipschitz_c.max(problem.forward.growth_c);
    let fail = |diagnostic: String| ChiCertificate {
        a: params.a,
        c1: f64::NAN,
        p,
        k: params.k,
        c,
        c_p_est: f64::NAN,
        points: Vec::new(),
        min_lhs: f64::NAN,
        max_lhs: f64::NAN,
        pass: false,
        diagnostic: Some(diagnostic),
    };
    if let Some(k) = e_psi.iter().position(|v| !v.is_finite()) {
        return Ok(fail(format!("E[psi(X_t)] is not finite at node {k}")));
    }
    let raw = e_psi.iter().copied().fold(0.0, f64::max);
    let c_p_est = if degenerate { raw } else { raw * params.inflation };
    let c1 = params
        .c1_override
        .unwrap_or(p * p * c + params.k + params.k * c_p_est + 1.0);
    let tk: Vec<usize> = (0..params.lattice_times)
        .map(|i| (i * kk + (params.lattice_times - 1) / 2) / (params.lattice_times - 1))
        .collect();
    let dxl = (params.x_max - params.x_min) / (params.lattice_x - 1) as f64;
    let cells: Vec<(usize, f64)> = tk
        .iter()
        .flat_map(|&k| (0..params.lattice_x).map(move |j| (k, params.x_min + dxl * j as f64)))
        .collect();
    let (a, kl) = (params.a, params.k);
    let points: Vec<ChiPoint> = cells
        .par_iter()
        .map(|&(k, x)| {
            let t = g.node(k);
            let (b, s) = averaged_coefficients(problem, bg, k, x)?;
            let scale = a * (c1 * (g.t1() - t)).exp();
            let (v, d1, d2) = psi(p, x);
            let chi = scale * v;
            let lhs = -c1 * chi
                + 0.5 * s * s * scale * d2
                + scale * d1 * b
                + kl * chi
                + kl * (scale * d1 * s).abs()
                + kl * scale * e_psi[k];
            Ok(ChiPoint { t, x, lhs })
        })
        .collect::<Result<_>>()?;
    let min_lhs = points.iter().map(|q| q.lhs).fold(f64::INFINITY, f64::min);
    let max_lhs = points.iter().map(|q| q.lhs).fold(f64::NEG_INFINITY, f64::max);
    if !max_lhs.is_finite() {
        return Ok(fail("non-finite left-hand side on the lattice".into()));
    }
    Ok(ChiCertificate {
        a,
        c1,
        p,
        k: kl,
        c,
        c_p_est,
        points,
        min_lhs,
        max_lhs,
        pass: max_lhs < 0.0,
        diagnostic: None,
    })
}

/// Log-quadratic growth class boundary.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct GrowthSpec {
    pub a_tilde: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub p: f64,
}

impl GrowthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.a_tilde > 0.0) || !(self.horizon > 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "growth spec needs A~ > 0, sigma >= 0, T > 0: {self:?}"
            )));
        }
        Ok(())
    }

    /// `t* = 1 / (2 Ã σ²)`; infinite when `σ = 0`.
    pub fn t_star(&self) -> f64 {
        1.0 / (2.0 * self.a_tilde * self.sigma * self.sigma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Finite,
    Divergent,
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthRow {
    pub t: f64,
    pub truncation_r: f64,
    pub integral_value: f64,
    /// Upper bound on the neglected tails (finite side only).
    pub tail_bound: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthReport {
    pub t_star: f64,
    pub rows: Vec<GrowthRow>,
}

impl GrowthReport {
    pub fn ladder(&self, t: f64) -> Vec<&GrowthRow> {
        self.rows.iter().filter(|r| r.t == t).collect()
    }
}

pub const DEFAULT_TRUNCATIONS: [f64; 6] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0];

fn softplus_half(v: f64) -> f64 {
    // ½ log(1 + e^{v})
    if v > 0.0 {
        0.5 * (v + (-v).exp().ln_1p())
    } else {
        0.5 * v.exp().ln_1p()
    }
}

/// `∫_{-R}^{R} exp{Ã [log((e^{2σb} + 1)^{1/2})]²} φ_t(b) db` by composite
/// Simpson, 400 panels per unit length.
pub fn truncated_growth_integral(spec: &GrowthSpec, t: f64, r: f64) -> f64 {
    let panels = ((800.0 * r).ceil() as usize).max(2) & !1;
    let h = 2.0 * r / panels as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * t).sqrt();
    let f = |b: f64| {
        let l = softplus_half(2.0 * spec.sigma * b);
        (spec.a_tilde * l * l - b * b / (2.0 * t)).exp() * norm
    };
    let mut s = f(-r) + f(r);
    for i in 1..panels {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(-r + h * i as f64);
    }
    s * h / 3.0
}

/// Tail bound beyond `|b| > R` when `Ã σ² t < 1/2`.
fn tail_bound(spec: &GrowthSpec, t: f64, r: f64) -> f64 {
    let c = 0.5 * std::f64::consts::LN_2;
    let s2 = spec.a_tilde * spec.sigma * spec.sigma;
    let gap = 1.0 / (2.0 * t) - s2;
    if s2 == 0.0 {
        let a = 1.0 / (2.0 * t);
        return 2.0 * (spec.a_tilde * c * c).exp() * (-a * r * r).exp() / (2.0 * a * r)
            / (2.0 * std::f64::consts::PI * t).sqrt();
    }
    // (σ|b| + c)² ≤ (1 + ε) σ² b² + (1 + 1/ε) c² with ε chosen to keep half
    // the Gaussian margin.
    let eps = gap / (2.0 * s2);
    let a = gap / 2.0;
    2.0 * (spec.a_tilde * (1.0 + 1.0 / eps) * c * c).exp() * (-a * r * r).exp() / (2.0 * a * r)
        / (2.0 * std::f64::consts::PI * t).sqrt()
}

/// `t*` and, for each probe time, the truncation ladder with the analytic
/// verdict `Ã σ² t ≥ 1/2 ⇒ divergent`.
pub fn growth_critical_time(spec: &GrowthSpec, probe_times: &[f64], truncations: &[f64]) -> Result<GrowthReport> {
    spec.validate()?;
    let t_star = spec.t_star();
    let mut rows = Vec::new();
    for &t in probe_times {
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("probe time {t} must be positive")));
        }
        let divergent = spec.a_tilde * spec.sigma * spec.sigma * t >= 0.5;
        for &r in truncations {
            rows.push(GrowthRow {
                t,
                truncation_r: r,
                integral_value: truncated_growth_integral(spec, t, r),
                tail_bound: (!divergent).then(|| tail_bound(spec, t, r)),
                verdict: if divergent { Verdict::Divergent } else { Verdict::Finite },
            });
        }
    }
    Ok(GrowthReport { t_star, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{Driver, DriverFlags};
    use crate::forward::{ForwardCoefficients, LawCoupling};
    use crate::markov::{build_background, MarkovSim, TerminalCost};
    use std::sync::Arc;

    fn heat(phi: TerminalCost, x0: f64) -> MarkovProblem {
        let fwd = ForwardCoefficients::scalar(|_, _, _| 0.0, |_, _, _| 1.0, LawCoupling::Free, 0.0, 1.0);
        MarkovProblem::new(fwd, Driver::zero(), phi, vec![x0], 0.5).unwrap()
    }

    fn bg_sim(paths: usize, steps: usize) -> MarkovSim {
        MarkovSim {
            n_steps: steps,
            background_paths: paths,
            flow_paths: paths,
            ..Default::default()
        }
    }

    #[test]
    fn terminal_slice_is_copied() {
        let phi = TerminalCost::General(Arc::new(|xp, x| (xp[0] - x[0]).cos()));
        let p = heat(phi.clone(), 0.0);
        let bg = build_background(&p, &bg_sim(400, 8)).unwrap();
        let g = PdeGrid1D::new(&p, &bg, -1.0, 1.0, 21).unwrap();
        let s = solve_nonlocal_pde_1d(&p, &bg, &g).unwrap().surface;
        let atoms = bg.law.atoms_at(8).unwrap();
        for (j, &x) in g.xs.iter().enumerate() {
            assert_eq!(s.value(8, j).to_bits(), phi.averaged(atoms, 1, &[x]).to_bits());
        }
    }

    #[test]
    fn heat_quadratic_interior_error() {
        let p = heat(TerminalCost::local(|x| x[0] * x[0]), 0.0);
        let bg = build_background(&p, &bg_sim(100, 16)).unwrap();
        let g = PdeGrid1D::new(&p, &bg, -3.0, 3.0, 121).unwrap();
        assert!(g.cfl_ratio <= CFL_SAFETY);
        let s = solve_nonlocal_pde_1d(&p, &bg, &g).unwrap().surface;
        for ti in 0..=16 {
            for (j, &x) in g.xs.iter().enumerate() {
                if x.abs() <= 1.0 {
                    let want = x * x + 0.5 - s.times[ti];
                    assert!((s.value(ti, j) - want).abs() < 2e-3, "{ti} {x}");
                }
            }
        }
    }

    #[test]
    fn cfl_violation_rejected() {
        let p = heat(TerminalCost::local(|x| x[0]), 0.0);
        let bg = build_background(&p, &bg_sim(50, 4)).unwrap();
        assert!(matches!(
            PdeGrid1D::with_refine(&p, &bg, -1.0, 1.0, 41, 1),
            Err(Error::Cfl { .. })
        ));
        assert!(PdeGrid1D::with_refine(&p, &bg, -1.0, 1.0, 4, 100).is_err());
    }

    #[test]
    fn richardson_order_in_time() {
        let p = heat(TerminalCost::local(|x| x[0].sin()), 0.0);
        let bg = build_background(&p, &bg_sim(50, 4)).unwrap();
        let base = PdeGrid1D::new(&p, &bg, -4.0, 4.0, 41).unwrap().refine;
        let at = |r: usize| {
            let g = PdeGrid1D::with_refine(&p, &bg, -4.0, 4.0, 41, r).unwrap();
            solve_nonlocal_pde_1d(&p, &bg, &g).unwrap().surface.value(0, 25)
        };
        let (a, b, c) = (at(base), at(2 * base), at(4 * base));
        let order = ((a - b) / (b - c)).abs().log2();
        assert!(order >= 0.8, "{order}");
    }

    #[test]
    fn transform_rules() {
        let f = Driver::separable(
            |_, _, y, _| y,
            None,
            1.0,
            DriverFlags {
                independent_of_zprime: true,
                nondecreasing_in_yprime: true,
            },
        );
        let fwd = ForwardCoefficients::scalar(|_, _, _| 0.0, |_, _, _| 1.0, LawCoupling::Free, 0.0, 1.0);
        let p = MarkovProblem::new(fwd, f, TerminalCost::local(|_| 1.0), vec![0.0], 1.0).unwrap();
        let times: Vec<f64> = (0..=4).map(|k| k as f64 / 4.0).collect();
        let xs = vec![-1.0, 0.0, 1.0];
        let ones = ValueSurface::new(times.clone(), xs.clone(), vec![1.0; 15], vec![0.0; 15], Provenance::Pde).unwrap();
        assert!(exp_transform(&p, &ones, 0.0, 10, 0).is_err());
        assert!(exp_transform(&p, &ones, 1.0, 10, 0).is_err());
        let tr = exp_transform(&p, &ones, 2.0, 500, 3).unwrap();
        assert!(tr.probe.pass);
        assert!((tr.probe.max_slope + 1.0).abs() < 1e-12);
        let e = scale_surface(&ones, 1.0).unwrap();
        for (ti, t) in times.iter().enumerate() {
            assert!((e.value(ti, 1) - t.exp()).abs() < 1e-15);
        }
        let vals: Vec<f64> = (0..15).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let s = ValueSurface::new(times, xs, vals.clone(), vec![0.0; 15], Provenance::Pde).unwrap();
        let back = scale_surface(&scale_surface(&s, 2.5).unwrap(), -2.5).unwrap();
        for (a, b) in back.values.iter().zip(&vals) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    fn frozen(x0: f64) -> MarkovProblem {
        let fwd = ForwardCoefficients::scalar(|_, _, _| 0.0, |_, _, _| 0.0, LawCoupling::Free, 0.0, 0.0);
        MarkovProblem::new(fwd, Driver::zero(), TerminalCost::local(|x| x[0]), vec![x0], 1.0).unwrap()
    }

    #[test]
    fn chi_frozen_forward() {
        let p = frozen(0.0);
        let bg = build_background(&p, &bg_sim(50, 8)).unwrap();
        let c = chi_supersolution_check(&p, &bg, &ChiParams::default()).unwrap();
        assert_eq!(c.c_p_est, 1.0);
        assert_eq!(c.c, 0.0);
        assert!(c.pass);
        // −χ (C₁ − 2K) + K·A e^{C₁(T−t)} ψ(0) at x = 0 is −χ.
        let at0 = c.points.iter().find(|q| q.x == 0.0 && q.t == 1.0).unwrap();
        assert!((at0.lhs + 2.0).abs() < 1e-12, "{}", at0.lhs);
    }

    #[test]
    fn chi_linear_and_zeroed() {
        let fwd = ForwardCoefficients::scalar(
            |_, xp, x| 0.5 * (xp - x),
            |_, _, _| 1.0,
            LawCoupling::Affine,
            1.0,
            1.0,
        );
        let p = MarkovProblem::new(fwd, Driver::zero(), TerminalCost::local(|x| x[0]), vec![0.0], 1.0).unwrap();
        let bg = build_background(&p, &bg_sim(5000, 16)).unwrap();
        let c = chi_supersolution_check(&p, &bg, &ChiParams::default()).unwrap();
        assert!(c.pass && c.max_lhs < 0.0, "{}", c.max_lhs);
        assert!((c.c1 - (4.0 + 1.0 + c.c_p_est + 1.0)).abs() < 1e-12);
        let zero = ChiParams {
            c1_override: Some(0.0),
            ..Default::default()
        };
        let bad = chi_supersolution_check(&p, &bg, &zero).unwrap();
        assert!(!bad.pass && bad.max_lhs > 0.0);
        assert!(chi_supersolution_check(&p, &bg, &ChiParams { a: 1.0, ..Default::default() }).is_err());
    }

    #[test]
    fn critical_time_values() {
        let s = GrowthSpec { a_tilde: 1.0, sigma: 1.0, horizon: 1.0, p: 2.0 };
        assert_eq!(s.t_star(), 0.5);
        let z = GrowthSpec { sigma: 0.0, ..s };
        let r = growth_critical_time(&z, &[0.5, 0.99], &DEFAULT_TRUNCATIONS).unwrap();
        assert!(r.t_star.is_infinite());
        assert!(r.rows.iter().all(|w| w.verdict == Verdict::Finite));
    }

    #[test]
    fn truncation_ladder_shapes() {
        let s = GrowthSpec { a_tilde: 2.0, sigma: 1.0, horizon: 1.0, p: 2.0 };
        let r = growth_critical_time(&s, &[0.2, 0.25, 0.3], &DEFAULT_TRUNCATIONS).unwrap();
        assert_eq!(r.t_star, 0.25);
        let fin = r.ladder(0.2);
        let last = fin[fin.len() - 1].integral_value;
        let prev = fin[fin.len() - 2].integral_value;
        assert!(((last - prev) / last).abs() < 1e-6, "{prev} {last}");
        assert!(fin.iter().all(|w| w.verdict == Verdict::Finite));
        assert!(fin[fin.len() - 1].tail_bound.unwrap() < 1e-6 * last);
        for t in [0.25, 0.3] {
            let l = r.ladder(t);
            assert!(l.iter().all(|w| w.verdict == Verdict::Divergent));
            for w in l.windows(2).skip(2) {
                assert!(w[1].integral_value > 1.5 * w[0].integral_value, "{t}: {:?}", w);
            }
        }
    }
}
