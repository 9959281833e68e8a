//! Forward solvers: the rank-N interacting particle system, the
//! self-interacting McKean-Vlasov Euler scheme, and the classical flow driven
//! by a frozen law.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::brownian::{check_storage, BrownianBundle};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::law::EmpiricalLaw;
use crate::parallel::chunked_vec_sum;

/// `(t, x', x, out)`: writes `b` (length n) or `σ` (row-major n x d) into `out`.
pub type CoefFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// How a coefficient depends on the law variable `x'`. The averaging
/// `E'[g(t, X', x)]` is computed exactly for `Free` and `Affine` in O(1) per
/// particle once the law mean is known.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LawCoupling {
    /// No dependence on `x'`.
    Free,
    /// Affine in `x'`: the average equals the value at the law mean.
    Affine,
    /// Anything else: explicit average over the atoms.
    General,
}

#[derive(Clone)]
pub struct ForwardCoefficients {
    pub n: usize,
    pub d: usize,
    pub b: CoefFn,
    pub sigma: CoefFn,
    pub coupling: LawCoupling,
    pub lipschitz_c: f64,
    pub growth_c: f64,
    /// Average `General` couplings over the first K atoms only.
    pub law_subsample: Option<usize>,
}

impl fmt::Debug for ForwardCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ForwardCoefficients")
            .field("n", &self.n)
            .field("d", &self.d)
            .field("coupling", &self.coupling)
            .field("lipschitz_c", &self.lipschitz_c)
            .field("growth_c", &self.growth_c)
            .field("law_subsample", &self.law_subsample)
            .finish()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CoefficientProbe {
    pub max_lipschitz_quotient: f64,
    pub max_growth_ratio: f64,
    pub probes: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

impl ForwardCoefficients {
    pub fn new(
        n: usize,
        d: usize,
        b: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        sigma: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        coupling: LawCoupling,
        lipschitz_c: f64,
        growth_c: f64,
    ) -> Self {
        Self {
            n,
            d,
            b: Arc::new(b),
            sigma: Arc::new(sigma),
            coupling,
            lipschitz_c,
            growth_c,
            law_subsample: None,
        }
    }

    /// One-dimensional coefficients from scalar closures.
    pub fn scalar(
        b: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(f64, f64, f64) -> f64 + Send + Sync + 'static,
        coupling: LawCoupling,
        lipschitz_c: f64,
        growth_c: f64,
    ) -> Self {
        Self::new(
            1,
            1,
            move |t, xp, x, out| out[0] = b(t, xp[0], x[0]),
            move |t, xp, x, out| out[0] = sigma(t, xp[0], x[0]),
            coupling,
            lipschitz_c,
            growth_c,
        )
    }

    pub fn with_subsample(mut self, k: Option<usize>) -> Self {
        self.law_subsample = k;
        self
    }

    /// Samples random point pairs in `[-radius, radius]` and `[0, horizon]`
    /// and compares the observed Lipschitz quotients and growth ratios with
    /// the declared constants.
    pub fn spot_check(
        &self,
        horizon: f64,
        radius: f64,
        probes: usize,
        tol: f64,
        seed: u64,
    ) -> Result<CoefficientProbe> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (self.n, self.d);
        let mut pt = || -> Vec<f64> { (0..n).map(|_| rng.random_range(-radius..radius)).collect() };
        let mut pts = Vec::with_capacity(probes);
        for _ in 0..probes {
            pts.push((pt(), pt(), pt(), pt()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut lip: f64 = 0.0;
        let mut growth: f64 = 0.0;
        let mut ob1 = vec![0.0; n];
        let mut ob2 = vec![0.0; n];
        let mut os1 = vec![0.0; n * d];
        let mut os2 = vec![0.0; n * d];
        for (xp1, x1, xp2, x2) in &pts {
            let t = rng.random_range(0.0..=horizon);
            (self.b)(t, xp1, x1, &mut ob1);
            (self.b)(t, xp2, x2, &mut ob2);
            (self.sigma)(t, xp1, x1, &mut os1);
            (self.sigma)(t, xp2, x2, &mut os2);
            if ob1
                .iter()
                .chain(&os1)
                .chain(&ob2)
                .chain(&os2)
                .any(|v| !v.is_finite())
            {
                return Err(Error::Hypothesis(
                    "coefficient returned a non-finite value on a probe".into(),
                ));
            }
            let dx = dist(xp1, xp2) + dist(x1, x2);
            if dx > 1e-12 {
                lip = lip.max(dist(&ob1, &ob2) / dx).max(dist(&os1, &os2) / dx);
            }
            let scale = 1.0 + norm(xp1) + norm(x1);
            growth = growth.max(norm(&ob1) / scale).max(norm(&os1) / scale);
        }
        if lip > self.lipschitz_c * (1.0 + tol) + 1e-12 {
            return Err(Error::Hypothesis(format!(
                "sampled Lipschitz quotient {lip:.4} exceeds declared constant {}",
                self.lipschitz_c
            )));
        }
        if growth > self.growth_c * (1.0 + tol) + 1e-12 {
            return Err(Error::Hypothesis(format!(
                "sampled growth ratio {growth:.4} exceeds declared constant {}",
                self.growth_c
            )));
        }
        Ok(CoefficientProbe {
            max_lipschitz_quotient: lip,
            max_growth_ratio: growth,
            probes,
        })
    }

    /// Evaluate `E'[b(t, X', x)]` and `E'[σ(t, X', x)]` against `atoms`
    /// (row-major, `n` per atom) whose mean is `mean`. Scratch buffers are
    /// reused by the caller.
    #[allow(clippy::too_many_arguments)]
    pub fn averaged(
        &self,
        t: f64,
        atoms: &[f64],
        mean: &[f64],
        x: &[f64],
        b_out: &mut [f64],
        s_out: &mut [f64],
        scratch_b: &mut [f64],
        scratch_s: &mut [f64],
    ) {
        match self.coupling {
            LawCoupling::Free => {
                (self.b)(t, x, x, b_out);
                (self.sigma)(t, x, x, s_out);
            }
            LawCoupling::Affine => {
                (self.b)(t, mean, x, b_out);
                (self.sigma)(t, mean, x, s_out);
            }
            LawCoupling::General => {
                let m = atoms.len() / self.n;
                let k = self.law_subsample.map_or(m, |k| k.clamp(1, m));
                b_out.iter_mut().for_each(|v| *v = 0.0);
                s_out.iter_mut().for_each(|v| *v = 0.0);
                for a in atoms.chunks_exact(self.n).take(k) {
                    (self.b)(t, a, x, scratch_b);
                    (self.sigma)(t, a, x, scratch_s);
                    for (o, v) in b_out.iter_mut().zip(scratch_b.iter()) {
                        *o += v;
                    }
                    for (o, v) in s_out.iter_mut().zip(scratch_s.iter()) {
                        *o += v;
                    }
                }
                let inv = 1.0 / k as f64;
                b_out.iter_mut().for_each(|v| *v *= inv);
                s_out.iter_mut().for_each(|v| *v *= inv);
            }
        }
    }
}

/// Starting condition of a forward flow.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialCondition {
    Point(Vec<f64>),
    /// One state per path, row-major.
    Samples(Vec<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct BundleRef {
    pub master_seed: u64,
    pub first_path: usize,
    pub n_paths: usize,
}

impl BundleRef {
    pub fn of(bundle: &BrownianBundle) -> Self {
        Self {
            master_seed: bundle.master_seed(),
            first_path: bundle.first_path(),
            n_paths: bundle.n_paths(),
        }
    }
}

/// Sample trajectories on a grid, stored time-major: slice `k` holds every
/// path's state at `t_k`.
#[derive(Clone, Debug)]
pub struct ParticleCloud {
    grid: TimeGrid,
    n: usize,
    n_paths: usize,
    states: Arc<Vec<f64>>,
    bundle_ref: BundleRef,
    initial: InitialCondition,
}

impl ParticleCloud {
    /// Wrap pre-computed time-major states.
    pub fn from_states(
        grid: TimeGrid,
        n: usize,
        n_paths: usize,
        states: Vec<f64>,
        bundle_ref: BundleRef,
        initial: InitialCondition,
    ) -> Result<Self> {
        if states.len() != grid.n_nodes() * n_paths * n {
            return Err(Error::InvalidArgument(format!(
                "state array of length {} does not match {} nodes x {n_paths} paths x {n}",
                states.len(),
                grid.n_nodes()
            )));
        }
        Ok(Self {
            grid,
            n,
            n_paths,
            states: Arc::new(states),
            bundle_ref,
            initial,
        })
    }

    /// The Brownian paths themselves as a cloud (`X = B`, started at 0).
    pub fn brownian(bundle: &BrownianBundle) -> Result<Self> {
        Self::brownian_stopped(bundle, bundle.n_steps())
    }

    /// `X_t = B_{t ∧ t_stop}`: the Markov state of a terminal value that reads
    /// the path at node `stop`.
    pub fn brownian_stopped(bundle: &BrownianBundle, stop: usize) -> Result<Self> {
        let grid = *bundle.grid();
        if stop > grid.n_steps() {
            return Err(Error::MissingLawIndex(stop));
        }
        let (m, d) = (bundle.n_paths(), bundle.dim());
        let mut states = vec![0.0; grid.n_nodes() * m * d];
        for k in 0..grid.n_steps() {
            let (done, rest) = states.split_at_mut((k + 1) * m * d);
            let prev = &done[k * m * d..];
            let next = &mut rest[..m * d];
            for i in 0..m {
                let inc = bundle.increment(i, k);
                for c in 0..d {
                    next[i * d + c] = prev[i * d + c] + if k < stop { inc[c] } else { 0.0 };
                }
            }
        }
        Self::from_states(
            grid,
            d,
            m,
            states,
            BundleRef::of(bundle),
            InitialCondition::Point(vec![0.0; d]),
        )
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn bundle_ref(&self) -> BundleRef {
        self.bundle_ref
    }

    pub fn initial(&self) -> &InitialCondition {
        &self.initial
    }

    #[inline]
    pub fn state(&self, path: usize, k: usize) -> &[f64] {
        let o = (k * self.n_paths + path) * self.n;
        &self.states[o..o + self.n]
    }

    /// All states at grid index `k`, row-major per path.
    #[inline]
    pub fn slice(&self, k: usize) -> &[f64] {
        let w = self.n_paths * self.n;
        &self.states[k * w..(k + 1) * w]
    }

    pub fn law_at(&self, k: usize) -> EmpiricalLaw {
        EmpiricalLaw::new(self.slice(k).to_vec(), self.n, k).expect("cloud slices are non-empty")
    }

    /// Running `sup_{s <= t_k} |X_s - X_0|^2` style quantities are built from this.
    pub fn path(&self, path: usize) -> Vec<Vec<f64>> {
        (0..self.grid.n_nodes())
            .map(|k| self.state(path, k).to_vec())
            .collect()
    }
}

/// The law of `X^{0,x0}` on every grid node, frozen after the McKean solve.
#[derive(Clone, Debug)]
pub struct FrozenLaw {
    grid: TimeGrid,
    n: usize,
    n_atoms: usize,
    atoms: Arc<Vec<f64>>,
    means: Vec<Vec<f64>>,
}

impl FrozenLaw {
    pub fn from_cloud(cloud: &ParticleCloud) -> Self {
        let means = (0..cloud.grid.n_nodes())
            .map(|k| slice_mean(cloud.slice(k), cloud.n))
            .collect();
        Self {
            grid: cloud.grid,
            n: cloud.n,
            n_atoms: cloud.n_paths,
            atoms: cloud.states.clone(),
            means,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn atoms_at(&self, k: usize) -> Result<&[f64]> {
        if k > self.grid.n_steps() {
            return Err(Error::MissingLawIndex(k));
        }
        let w = self.n_atoms * self.n;
        Ok(&self.atoms[k * w..(k + 1) * w])
    }

    pub fn mean_at(&self, k: usize) -> Result<&[f64]> {
        self.means
            .get(k)
            .map(|v| v.as_slice())
            .ok_or(Error::MissingLawIndex(k))
    }

    pub fn law_at(&self, k: usize) -> Result<EmpiricalLaw> {
        EmpiricalLaw::new(self.atoms_at(k)?.to_vec(), self.n, k)
    }
}

fn slice_mean(slice: &[f64], n: usize) -> Vec<f64> {
    let m = slice.len() / n;
    let s = chunked_vec_sum(m, n, |i, acc| {
        for (a, v) in acc.iter_mut().zip(&slice[i * n..(i + 1) * n]) {
            *a += v;
        }
    });
    s.into_iter().map(|v| v / m as f64).collect()
}

fn initial_slice(init: &InitialCondition, n: usize, m: usize) -> Result<Vec<f64>> {
    match init {
        InitialCondition::Point(x) => {
            if x.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "initial point has dimension {}, coefficients expect {n}",
                    x.len()
                )));
            }
            Ok(x.iter().cloned().cycle().take(n * m).collect())
        }
        InitialCondition::Samples(s) => {
            if s.len() != n * m {
                return Err(Error::InvalidArgument(format!(
                    "initial samples have {} values, expected {} paths x {n}",
                    s.len(),
                    m
                )));
            }
            Ok(s.clone())
        }
    }
}

fn check_dims(coeffs: &ForwardCoefficients, bundle: &BrownianBundle) -> Result<()> {
    if coeffs.d != bundle.dim() {
        return Err(Error::GridMismatch(format!(
            "coefficients expect {} Brownian components, bundle has {}",
            coeffs.d,
            bundle.dim()
        )));
    }
    Ok(())
}

fn first_non_finite(slice: &[f64], n: usize) -> Option<usize> {
    slice
        .par_chunks(n)
        .position_first(|s| s.iter().any(|v| !v.is_finite()))
}

/// Generic Euler driver: `law_for_step(k)` supplies the atoms and mean the
/// coefficients are averaged against when stepping from `t_k` (the current
/// slice itself when `None`).
fn euler<'a, L>(
    coeffs: &ForwardCoefficients,
    grid: TimeGrid,
    bundle: &BrownianBundle,
    init: &InitialCondition,
    law_for_step: L,
) -> Result<ParticleCloud>
where
    L: Fn(usize) -> Result<Option<(&'a [f64], &'a [f64])>>,
{
    check_dims(coeffs, bundle)?;
    let (n, d) = (coeffs.n, coeffs.d);
    let m = bundle.n_paths();
    let total = check_storage(&[grid.n_nodes(), m, n])?;
    let mut states = Vec::with_capacity(total);
    states.extend(initial_slice(init, n, m)?);
    let dt = grid.dt();
    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        let w = m * n;
        let (done, _) = states.split_at(k * w + w);
        let cur = &done[k * w..];
        let own_mean;
        let (atoms, mean): (&[f64], &[f64]) = match law_for_step(k)? {
            Some(l) => l,
            None => {
                own_mean = if coeffs.coupling == LawCoupling::Affine {
                    slice_mean(cur, n)
                } else {
                    vec![0.0; n]
                };
                (cur, &own_mean)
            }
        };
        let mut next = vec![0.0; w];
        next.par_chunks_mut(n).enumerate().for_each_init(
            || {
                (
                    vec![0.0; n],
                    vec![0.0; n * d],
                    vec![0.0; n],
                    vec![0.0; n * d],
                )
            },
            |(bo, so, sb, ss), (i, out)| {
                let x = &cur[i * n..(i + 1) * n];
                coeffs.averaged(t, atoms, mean, x, bo, so, sb, ss);
                let db = bundle.increment(i, k);
                for r in 0..n {
                    let mut v = x[r] + bo[r] * dt;
                    for c in 0..d {
                        v += so[r * d + c] * db[c];
                    }
                    out[r] = v;
                }
            },
        );
        if let Some(path) = first_non_finite(&next, n) {
            return Err(Error::NonFinite {
                stage: "forward Euler step",
                path,
                step: k + 1,
            });
        }
        states.extend_from_slice(&next);
    }
    ParticleCloud::from_states(grid, n, m, states, BundleRef::of(bundle), init.clone())
}

/// Self-interacting Euler scheme for the McKean-Vlasov SDE started at `x0`.
/// The law used from `t_k` to `t_{k+1}` is the cloud at `t_k`.
pub fn solve_mckean(
    coeffs: &ForwardCoefficients,
    x0: &[f64],
    bundle: &BrownianBundle,
) -> Result<(ParticleCloud, FrozenLaw)> {
    if bundle.n_paths() < 2 {
        return Err(Error::InvalidArgument(
            "McKean-Vlasov solve needs at least two particles".into(),
        ));
    }
    let init = InitialCondition::Point(x0.to_vec());
    let cloud = euler(coeffs, *bundle.grid(), bundle, &init, |_| Ok(None))?;
    let law = FrozenLaw::from_cloud(&cloud);
    Ok((cloud, law))
}

/// Classical Euler scheme for `X^{t,ζ}` whose coefficients are averaged
/// against the frozen law. `bundle` must live on the frozen grid restricted to
/// `[t_{t_index}, T]`.
pub fn solve_conditional_flow(
    coeffs: &ForwardCoefficients,
    frozen: &FrozenLaw,
    t_index: usize,
    init: &InitialCondition,
    bundle: &BrownianBundle,
) -> Result<ParticleCloud> {
    let fg = frozen.grid();
    if t_index >= fg.n_nodes() {
        return Err(Error::MissingLawIndex(t_index));
    }
    let expected_steps = fg.n_steps() - t_index;
    let bg = bundle.grid();
    if t_index < fg.n_steps()
        && (bg.n_steps() != expected_steps
            || (bg.t0() - fg.node(t_index)).abs() > 1e-12
            || (bg.t1() - fg.t1()).abs() > 1e-12)
    {
        return Err(Error::GridMismatch(format!(
            "flow bundle covers [{}, {}] in {} steps; frozen law needs [{}, {}] in {expected_steps}",
            bg.t0(),
            bg.t1(),
            bg.n_steps(),
            fg.node(t_index),
            fg.t1()
        )));
    }
    if t_index == fg.n_steps() {
        return Err(Error::InvalidArgument(
            "conditional flow started at the terminal time has no steps".into(),
        ));
    }
    euler(coeffs, *bg, bundle, init, |k| {
        Ok(Some((
            frozen.atoms_at(t_index + k)?,
            frozen.mean_at(t_index + k)?,
        )))
    })
}

/// Rank-N particle system: `n_particles + 1` particles started at `x0`, each
/// driven by its own path of `bundle` and averaging the coefficients over the
/// other N particles. Row `j` of the result is particle `j`; row 0 plays the
/// tagged particle `X`.
pub fn solve_n_particle(
    coeffs: &ForwardCoefficients,
    n_particles: usize,
    x0: &[f64],
    bundle: &BrownianBundle,
) -> Result<ParticleCloud> {
    if n_particles == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    if bundle.n_paths() != n_particles + 1 {
        return Err(Error::InvalidArgument(format!(
            "rank-{n_particles} system needs {} independent paths, bundle has {}",
            n_particles + 1,
            bundle.n_paths()
        )));
    }
    check_dims(coeffs, bundle)?;
    let (n, d) = (coeffs.n, coeffs.d);
    let m = n_particles + 1;
    let grid = *bundle.grid();
    let dt = grid.dt();
    let init = InitialCondition::Point(x0.to_vec());
    let mut states = initial_slice(&init, n, m)?;
    let inv_n = 1.0 / n_particles as f64;
    for k in 0..grid.n_steps() {
        let t = grid.node(k);
        let w = m * n;
        let cur = states[k * w..].to_vec();
        let total: Vec<f64> = (0..n)
            .map(|r| cur.chunks_exact(n).map(|x| x[r]).sum())
            .collect();
        let mut next = vec![0.0; w];
        next.par_chunks_mut(n).enumerate().for_each_init(
            || {
                (
                    vec![0.0; n],
                    vec![0.0; n * d],
                    vec![0.0; n],
                    vec![0.0; n * d],
                    vec![0.0; n],
                )
            },
            |(bo, so, sb, ss, others), (j, out)| {
                let x = &cur[j * n..(j + 1) * n];
                match coeffs.coupling {
                    LawCoupling::Free => {
                        (coeffs.b)(t, x, x, bo);
                        (coeffs.sigma)(t, x, x, so);
                    }
                    LawCoupling::Affine => {
                        for r in 0..n {
                            others[r] = (total[r] - x[r]) * inv_n;
                        }
                        (coeffs.b)(t, others, x, bo);
                        (coeffs.sigma)(t, others, x, so);
                    }
                    LawCoupling::General => {
                        bo.iter_mut().for_each(|v| *v = 0.0);
                        so.iter_mut().for_each(|v| *v = 0.0);
                        for (i, a) in cur.chunks_exact(n).enumerate() {
                            if i == j {
                                continue;
                            }
                            (coeffs.b)(t, a, x, sb);
                            (coeffs.sigma)(t, a, x, ss);
                            bo.iter_mut().zip(sb.iter()).for_each(|(o, v)| *o += v);
                            so.iter_mut().zip(ss.iter()).for_each(|(o, v)| *o += v);
                        }
                        bo.iter_mut().for_each(|v| *v *= inv_n);
                        so.iter_mut().for_each(|v| *v *= inv_n);
                    }
                }
                let db = bundle.increment(j, k);
                for r in 0..n {
                    let mut v = x[r] + bo[r] * dt;
                    for c in 0..d {
                        v += so[r * d + c] * db[c];
                    }
                    out[r] = v;
                }
            },
        );
        if let Some(path) = first_non_finite(&next, n) {
            return Err(Error::NonFinite {
                stage: "particle system step",
                path,
                step: k + 1,
            });
        }
        states.extend_from_slice(&next);
    }
    ParticleCloud::from_states(grid, n, m, states, BundleRef::of(bundle), init)
}

#[derive(Clone, Debug, Serialize)]
pub struct ChaosGap {
    pub n_particles: usize,
    pub replicates: usize,
    /// `E[|X^{(N)}_T - X_T|^2]^{1/2}` for the tagged particle.
    pub l2_gap: f64,
    pub std_error: f64,
}

/// L² gap at `T` between the tagged particle of the rank-N system and the
/// flow under `frozen` driven by the same Brownian path. Replicate `r` uses
/// the global paths `r(N+1)..(r+1)(N+1)` of `seed`.
pub fn chaos_gap(
    coeffs: &ForwardCoefficients,
    frozen: &FrozenLaw,
    x0: &[f64],
    n_particles: usize,
    replicates: usize,
    seed: u64,
) -> Result<ChaosGap> {
    if replicates < 2 {
        return Err(Error::InvalidArgument("chaos gap needs at least two replicates".into()));
    }
    let grid = *frozen.grid();
    let m = n_particles + 1;
    let sq: Vec<f64> = (0..replicates)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let bundle = crate::brownian::sample_brownian_range(grid, coeffs.d, r * m, m, seed)?;
            let system = solve_n_particle(coeffs, n_particles, x0, &bundle)?;
            let tagged = bundle.slice(0, 1)?;
            let init = InitialCondition::Point(x0.to_vec());
            let limit = solve_conditional_flow(coeffs, frozen, 0, &init, &tagged)?;
            let k = grid.n_steps();
            Ok(system
                .state(0, k)
                .iter()
                .zip(limit.state(0, k))
                .map(|(a, b)| (a - b).powi(2))
                .sum())
        })
        .collect::<Result<_>>()?;
    let n = replicates as f64;
    let mean = sq.iter().sum::<f64>() / n;
    let var = sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let l2 = mean.sqrt();
    Ok(ChaosGap {
        n_particles,
        replicates,
        l2_gap: l2,
        std_error: if l2 > 0.0 { (var / n).sqrt() / (2.0 * l2) } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::{sample_brownian, sample_brownian_range};

    fn zero() -> ForwardCoefficients {
        ForwardCoefficients::scalar(|_, _, _| 0.0, |_, _, _| 0.0, LawCoupling::Free, 0.0, 0.0)
    }

    fn mean_drift() -> ForwardCoefficients {
        ForwardCoefficients::scalar(|_, xp, _| xp, |_, _, _| 0.0, LawCoupling::Affine, 1.0, 1.0)
    }

    #[test]
    fn stopped_cloud_freezes_after_stop() {
        let grid = TimeGrid::new(0.0, 2.0, 8).unwrap();
        let bundle = sample_brownian(grid, 1, 50, 3).unwrap();
        let full = ParticleCloud::brownian(&bundle).unwrap();
        let stopped = ParticleCloud::brownian_stopped(&bundle, 4).unwrap();
        for k in 0..=8 {
            assert_eq!(stopped.slice(k), full.slice(k.min(4)));
        }
        assert!(ParticleCloud::brownian_stopped(&bundle, 9).is_err());
    }

    #[test]
    fn frozen_dynamics_stay_put() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let b = sample_brownian(g, 1, 4, 0).unwrap();
        let cloud = solve_n_particle(&zero(), 3, &[0.7], &b).unwrap();
        for j in 0..4 {
            for k in 0..=10 {
                assert_eq!(cloud.state(j, k), &[0.7]);
            }
        }
    }

    #[test]
    fn particle_mean_ode() {
        let g = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let b = sample_brownian(g, 1, 51, 0).unwrap();
        let cloud = solve_n_particle(&mean_drift(), 50, &[1.0], &b).unwrap();
        let e = std::f64::consts::E;
        for j in 0..51 {
            let x = cloud.state(j, 200)[0];
            assert!((x - e).abs() < 2.0 * e / 200.0, "{x}");
            // All particles see the same average, so they coincide.
            assert_eq!(x, cloud.state(0, 200)[0]);
        }
    }

    #[test]
    fn general_and_affine_agree_on_affine_coefficients() {
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let b = sample_brownian(g, 1, 9, 3).unwrap();
        let mk = |c| {
            ForwardCoefficients::scalar(
                |_, xp, x| 0.5 * (xp - x),
                |_, xp, _| 1.0 + 0.1 * xp,
                c,
                1.0,
                1.5,
            )
        };
        let a = solve_n_particle(&mk(LawCoupling::Affine), 8, &[0.2], &b).unwrap();
        let gnr = solve_n_particle(&mk(LawCoupling::General), 8, &[0.2], &b).unwrap();
        for j in 0..9 {
            assert!((a.state(j, 20)[0] - gnr.state(j, 20)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn exchangeability() {
        let g = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let b = sample_brownian(g, 1, 4, 8).unwrap();
        let coeffs = ForwardCoefficients::scalar(
            |_, xp, x| (xp - x).sin(),
            |_, xp, x| 1.0 + 0.3 * (xp * x).cos(),
            LawCoupling::General,
            1.0,
            2.0,
        );
        let perm = [2, 0, 3, 1];
        let base = solve_n_particle(&coeffs, 3, &[0.0], &b).unwrap();
        let permuted = solve_n_particle(&coeffs, 3, &[0.0], &b.permuted(&perm).unwrap()).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for k in 0..=16 {
                assert!((permuted.state(i, k)[0] - base.state(p, k)[0]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn additive_noise_is_exact() {
        let g = TimeGrid::new(0.0, 1.0, 32).unwrap();
        let b = sample_brownian(g, 1, 100, 1).unwrap();
        let coeffs =
            ForwardCoefficients::scalar(|_, _, _| 0.0, |_, _, _| 0.4, LawCoupling::Free, 0.0, 0.4);
        let (cloud, law) = solve_mckean(&coeffs, &[0.5], &b).unwrap();
        for i in 0..100 {
            for k in [0, 7, 32] {
                let exact = 0.5 + 0.4 * b.value(i, k)[0];
                assert!((cloud.state(i, k)[0] - exact).abs() < 1e-12);
            }
        }
        assert_eq!(law.n_atoms(), 100);
    }

    #[test]
    fn mckean_mean_ode() {
        let g = TimeGrid::new(0.0, 1.0, 256).unwrap();
        let b = sample_brownian(g, 1, 1000, 1).unwrap();
        let (cloud, law) = solve_mckean(&mean_drift(), &[1.0], &b).unwrap();
        let m = law.mean_at(256).unwrap()[0];
        let e = std::f64::consts::E;
        assert!((m - e).abs() < e / 256.0 + 1e-9, "{m}");
        assert_eq!(cloud.law_at(256).mean()[0], m);
    }

    #[test]
    fn conditional_flow_matches_mckean_without_coupling() {
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let b = sample_brownian(g, 1, 50, 4).unwrap();
        let coeffs = ForwardCoefficients::scalar(
            |_, _, x| -x,
            |_, _, x| 0.5 + 0.1 * x.sin(),
            LawCoupling::Free,
            1.0,
            1.0,
        );
        let (cloud, law) = solve_mckean(&coeffs, &[0.3], &b).unwrap();
        let flow =
            solve_conditional_flow(&coeffs, &law, 0, &InitialCondition::Point(vec![0.3]), &b)
                .unwrap();
        assert_eq!(flow.slice(20), cloud.slice(20));
    }

    #[test]
    fn conditional_flow_grid_checks() {
        let g = TimeGrid::new(0.0, 1.0, 20).unwrap();
        let b = sample_brownian(g, 1, 10, 4).unwrap();
        let (_, law) = solve_mckean(&mean_drift(), &[0.0], &b).unwrap();
        let init = InitialCondition::Point(vec![0.0]);
        assert!(matches!(
            solve_conditional_flow(&mean_drift(), &law, 5, &init, &b),
            Err(Error::GridMismatch(_))
        ));
        let sub = TimeGrid::new(g.node(5), 1.0, 15).unwrap();
        let bs = sample_brownian_range(sub, 1, 0, 10, 9).unwrap();
        assert!(solve_conditional_flow(&mean_drift(), &law, 5, &init, &bs).is_ok());
        assert!(matches!(
            solve_conditional_flow(&mean_drift(), &law, 25, &init, &bs),
            Err(Error::MissingLawIndex(25))
        ));
    }

    #[test]
    fn non_finite_reported() {
        let g = TimeGrid::new(0.0, 1.0, 10).unwrap();
        let b = sample_brownian(g, 1, 5, 0).unwrap();
        let blow = ForwardCoefficients::scalar(
            |t, _, _| if t > 0.45 { f64::NAN } else { 0.0 },
            |_, _, _| 0.0,
            LawCoupling::Free,
            0.0,
            0.0,
        );
        let err = solve_mckean(&blow, &[0.0], &b).unwrap_err();
        assert!(
            matches!(
                err,
                Error::NonFinite {
                    path: 0,
                    step: 6,
                    ..
                }
            ),
            "{err:?}"
        );
    }

    #[test]
    fn spot_check_flags_understated_constant() {
        let c = ForwardCoefficients::scalar(
            |_, xp, x| 2.0 * xp - x,
            |_, _, _| 1.0,
            LawCoupling::Affine,
            0.5,
            3.0,
        );
        assert!(matches!(
            c.spot_check(1.0, 3.0, 500, 0.01, 0),
            Err(Error::Hypothesis(_))
        ));
        let ok = ForwardCoefficients {
            lipschitz_c: 2.0,
            ..c
        };
        let probe = ok.spot_check(1.0, 3.0, 500, 0.01, 0).unwrap();
        assert!(probe.max_lipschitz_quotient <= 2.0);
    }

    #[test]
    fn samples_initial_condition() {
        let g = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let b = sample_brownian(g, 1, 3, 0).unwrap();
        let (_, law) = solve_mckean(&zero(), &[0.0], &b).unwrap();
        let init = InitialCondition::Samples(vec![1.0, 2.0, 3.0]);
        let flow = solve_conditional_flow(&zero(), &law, 0, &init, &b).unwrap();
        assert_eq!(flow.slice(4), &[1.0, 2.0, 3.0]);
        let bad = InitialCondition::Samples(vec![1.0]);
        assert!(solve_conditional_flow(&zero(), &law, 0, &bad, &b).is_err());
    }

    #[test]
    fn chaos_gap_decays_like_inverse_root_n() {
        let c = ForwardCoefficients::scalar(
            |_, xp, x| 0.5 * (xp - x),
            |_, _, _| 1.0,
            LawCoupling::Affine,
            1.0,
            1.0,
        );
        let g = TimeGrid::new(0.0, 1.0, 16).unwrap();
        let b = sample_brownian(g, 1, 100_000, 3).unwrap();
        let (_, law) = solve_mckean(&c, &[0.0], &b).unwrap();
        let ns = [8usize, 16, 32, 64, 128, 256, 512];
        let gaps: Vec<f64> = ns
            .iter()
            .map(|&n| chaos_gap(&c, &law, &[0.0], n, 400, 11).unwrap().l2_gap)
            .collect();
        let x: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
        let fit = crate::stats::loglog_slope(&x, &gaps).unwrap();
        assert!(fit.slope > -0.65 && fit.slope < -0.35, "{fit:?} {gaps:?}");
    }
}
