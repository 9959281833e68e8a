//! Decoupled mean-field FBSDE in Markov form: the value function
//! `u(t, x) = Y_t^{t,x}`, the backward semigroup and the dynamic programming
//! identity, plus empirical regularity of `u`.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::brownian::{sample_brownian, BrownianBundle};
use crate::bsde::{
    picard, solve_meanfield_bsde, BackwardSolver, BsdePair, Driver, LawSlice, LawSource,
    PicardConfig, StepDriver,
};
use crate::error::{Error, Result};
use crate::forward::{
    solve_conditional_flow, solve_mckean, ForwardCoefficients, FrozenLaw, InitialCondition,
    ParticleCloud,
};
use crate::grid::TimeGrid;
use crate::parallel::chunked_sum;
use crate::stats::{bootstrap_se_of_mean, loglog_slope, SlopeFit};

pub type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type PairFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Terminal cost `Φ(x', x)`.
#[derive(Clone)]
pub enum TerminalCost {
    /// `Φ(x', x) = local(x) + law(x')`.
    Separable {
        local: PointFn,
        law: Option<PointFn>,
    },
    /// `(x', x) -> Φ`.
    General(PairFn),
}

impl fmt::Debug for TerminalCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Separable { law, .. } => write!(f, "Separable(law: {})", law.is_some()),
            Self::General(_) => write!(f, "General"),
        }
    }
}

impl TerminalCost {
    pub fn local(g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self::Separable {
            local: Arc::new(g),
            law: None,
        }
    }

    pub fn eval(&self, x_prime: &[f64], x: &[f64]) -> f64 {
        match self {
            Self::Separable { local, law } => local(x) + law.as_ref().map_or(0.0, |l| l(x_prime)),
            Self::General(g) => g(x_prime, x),
        }
    }

    /// `E'[Φ(X', x)]` over the atoms (row-major, dimension `n`).
    pub fn averaged(&self, atoms: &[f64], n: usize, x: &[f64]) -> f64 {
        let m = atoms.len() / n;
        match self {
            Self::Separable { local, law } => {
                local(x)
                    + law.as_ref().map_or(0.0, |l| {
                        chunked_sum(m, |i| l(&atoms[i * n..(i + 1) * n])) / m as f64
                    })
            }
            Self::General(g) => chunked_sum(m, |i| g(&atoms[i * n..(i + 1) * n], x)) / m as f64,
        }
    }

    /// `E'[Φ(X', x_i)]` for every row of `xs`.
    fn averaged_many(&self, atoms: &[f64], n: usize, xs: &[f64]) -> Vec<f64> {
        match self {
            Self::Separable { local, law } => {
                let m = atoms.len() / n;
                let shift = law.as_ref().map_or(0.0, |l| {
                    chunked_sum(m, |i| l(&atoms[i * n..(i + 1) * n])) / m as f64
                });
                xs.par_chunks(n).map(|x| local(x) + shift).collect()
            }
            Self::General(_) => xs
                .par_chunks(n)
                .map(|x| self.averaged(atoms, n, x))
                .collect(),
        }
    }
}

/// Data `(b, σ, f, Φ, x0)` of the decoupled system. The driver's `z'` slot is
/// never filled: `f` sees `(t, x', x, y', y, z)`.
#[derive(Clone, Debug)]
pub struct MarkovProblem {
    pub forward: ForwardCoefficients,
    pub driver: Driver,
    pub phi: TerminalCost,
    pub x0: Vec<f64>,
    pub horizon: f64,
    pub lipschitz_c: f64,
    pub growth_c: f64,
}

impl MarkovProblem {
    pub fn new(
        forward: ForwardCoefficients,
        driver: Driver,
        phi: TerminalCost,
        x0: Vec<f64>,
        horizon: f64,
    ) -> Result<Self> {
        if x0.len() != forward.n {
            return Err(Error::InvalidArgument(format!(
                "x0 has dimension {}, forward state {}",
                x0.len(),
                forward.n
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "horizon {horizon} must be positive"
            )));
        }
        if !driver.flags.nondecreasing_in_yprime {
            return Err(Error::Hypothesis(
                "Markov driver must be declared nondecreasing in y'".into(),
            ));
        }
        let lipschitz_c = forward.lipschitz_c.max(driver.lipschitz_c);
        let growth_c = forward.growth_c;
        Ok(Self {
            forward,
            driver,
            phi,
            x0,
            horizon,
            lipschitz_c,
            growth_c,
        })
    }

    pub fn dim(&self) -> usize {
        self.forward.n
    }

    /// Probe the declared monotonicity in `y'` on random ordered pairs.
    pub fn check_monotone(&self, probes: usize, seed: u64) -> Result<()> {
        let p = self.driver.probe(
            self.forward.n,
            self.forward.d,
            self.horizon,
            3.0,
            probes,
            seed,
        )?;
        if p.monotonicity_violations > 0 {
            return Err(Error::Hypothesis(format!(
                "driver decreased in y' on {} of {} probes",
                p.monotonicity_violations, p.probes
            )));
        }
        Ok(())
    }
}

/// Simulation sizes for the Markov layer.
#[derive(Clone, Debug, Serialize)]
pub struct MarkovSim {
    pub n_steps: usize,
    pub background_paths: usize,
    pub background_seed: u64,
    pub flow_paths: usize,
    /// Shared by every flow so that nearby nodes see common random numbers.
    pub flow_seed: u64,
    pub picard: PicardConfig,
    pub bootstrap_resamples: usize,
}

impl Default for MarkovSim {
    fn default() -> Self {
        Self {
            n_steps: 32,
            background_paths: 20_000,
            background_seed: 0,
            flow_paths: 10_000,
            flow_seed: 1,
            picard: PicardConfig::default(),
            bootstrap_resamples: 200,
        }
    }
}

/// `X^{0,x0}` and `(Y, Z)^{0,x0}`, solved once and frozen.
#[derive(Clone, Debug)]
pub struct MeanFieldBackground {
    pub law: FrozenLaw,
    pub cloud: ParticleCloud,
    pub bundle: BrownianBundle,
    pub pair: BsdePair,
}

impl MeanFieldBackground {
    pub fn grid(&self) -> &TimeGrid {
        self.law.grid()
    }

    /// Frozen law arguments from node `k` to the end.
    fn slices_from(&self, k: usize) -> Vec<LawSlice<'_>> {
        (k..self.grid().n_steps())
            .map(|j| self.pair.law_slice(&self.cloud, j))
            .collect()
    }

    fn terminal_atoms(&self) -> &[f64] {
        self.cloud.slice(self.grid().n_steps())
    }
}

pub fn build_background(problem: &MarkovProblem, sim: &MarkovSim) -> Result<MeanFieldBackground> {
    let grid = TimeGrid::new(0.0, problem.horizon, sim.n_steps)?;
    let bundle = sample_brownian(
        grid,
        problem.forward.d,
        sim.background_paths,
        sim.background_seed,
    )?;
    build_background_on(problem, bundle, &sim.picard)
}

/// Background on a caller-supplied bundle.
pub fn build_background_on(
    problem: &MarkovProblem,
    bundle: BrownianBundle,
    picard_cfg: &PicardConfig,
) -> Result<MeanFieldBackground> {
    if (bundle.grid().t0()).abs() > 1e-12 || (bundle.grid().t1() - problem.horizon).abs() > 1e-12 {
        return Err(Error::GridMismatch(format!(
            "background bundle covers [{}, {}], problem horizon is {}",
            bundle.grid().t0(),
            bundle.grid().t1(),
            problem.horizon
        )));
    }
    let (cloud, law) = solve_mckean(&problem.forward, &problem.x0, &bundle)?;
    let n = problem.dim();
    let atoms = cloud.slice(bundle.grid().n_steps());
    let xi = problem.phi.averaged_many(atoms, n, atoms);
    let pair = solve_meanfield_bsde(&problem.driver, &xi, &cloud, &bundle, picard_cfg)?;
    Ok(MeanFieldBackground {
        law,
        cloud,
        bundle,
        pair,
    })
}

/// The flow `X^{t_k, init}` on `[t_k, T]` and its bundle.
pub fn conditional_flow(
    problem: &MarkovProblem,
    bg: &MeanFieldBackground,
    k: usize,
    init: &InitialCondition,
    n_paths: usize,
    seed: u64,
) -> Result<(ParticleCloud, BrownianBundle)> {
    let g = bg.grid();
    if k >= g.n_steps() {
        return Err(Error::MissingLawIndex(k));
    }
    let sub = TimeGrid::new(g.node(k), g.t1(), g.n_steps() - k)?;
    let bundle = sample_brownian(sub, problem.forward.d, n_paths, seed)?;
    let cloud = solve_conditional_flow(&problem.forward, &bg.law, k, init, &bundle)?;
    Ok((cloud, bundle))
}

/// Solve `(5.2)`-type BSDE along a flow from node `k`: terminal `E'[Φ(X_T', X_T)]`
/// and law arguments taken from the background.
pub fn solve_flow_bsde(
    problem: &MarkovProblem,
    bg: &MeanFieldBackground,
    k: usize,
    cloud: &ParticleCloud,
    bundle: &BrownianBundle,
    config: &PicardConfig,
) -> Result<BsdePair> {
    let n = problem.dim();
    let xt = cloud.slice(cloud.grid().n_steps());
    let xi = problem.phi.averaged_many(bg.terminal_atoms(), n, xt);
    let solver = BackwardSolver::new(cloud, bundle, config)?;
    picard(
        &solver,
        &problem.driver,
        &xi,
        config,
        &LawSource::Fixed(bg.slices_from(k)),
    )
}

/// One value `u(t, x)` with its error bar.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ValueEstimate {
    pub t: f64,
    /// Regression value at the start node (path 0; every path starts at `x`).
    pub u: f64,
    /// Path average of the start-node values.
    pub u_mean: f64,
    pub std_error: f64,
    /// `|u - u_mean| > 3 std_error`.
    pub misspecified: bool,
}

/// Bootstrap standard error of the pathwise form `ξ + Σ g Δt` of `Y_t`, with
/// the driver re-evaluated along each path.
fn pathwise_se<G: StepDriver + ?Sized>(
    pair: &BsdePair,
    cloud: &ParticleCloud,
    g: &G,
    resamples: usize,
    seed: u64,
) -> f64 {
    let grid = pair.grid();
    let (m, kk, dt) = (pair.n_paths(), grid.n_steps(), grid.dt());
    if m < 2 {
        return 0.0;
    }
    let v: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut s = pair.y(i, kk);
            for k in 0..kk {
                s += g.eval(k, i, cloud.state(i, k), pair.y(i, k), pair.z(i, k)) * dt;
            }
            s
        })
        .collect();
    bootstrap_se_of_mean(&v, resamples, seed)
}

fn estimate<G: StepDriver + ?Sized>(
    pair: &BsdePair,
    cloud: &ParticleCloud,
    g: &G,
    resamples: usize,
    seed: u64,
) -> ValueEstimate {
    let u = pair.y(0, 0);
    let u_mean = pair.mean_y(0);
    let std_error = pathwise_se(pair, cloud, g, resamples, seed);
    ValueEstimate {
        t: pair.grid().t0(),
        u,
        u_mean,
        std_error,
        misspecified: (u - u_mean).abs() > 3.0 * std_error + 1e-12 * (1.0 + u.abs()),
    }
}

/// `u(t_k, x)`.
pub fn value_function(
    problem: &MarkovProblem,
    bg: &MeanFieldBackground,
    k: usize,
    x: &[f64],
    sim: &MarkovSim,
) -> Result<ValueEstimate> {
    value_function_seeded(problem, bg, k, x, sim, sim.flow_seed)
}

pub fn value_function_seeded(
    problem: &MarkovProblem,
    bg: &MeanFieldBackground,
    k: usize,
    x: &[f64],
    sim: &MarkovSim,
    seed: u64,
) -> Result<ValueEstimate> {
    let g = bg.grid();
    if k > g.n_steps() {
        return Err(Error::MissingLawIndex(k));
    }
    if x.len() != problem.dim() {
        return Err(Error::InvalidArgument(format!(
            "point of dimension {}, state dimension {}",
            x.len(),
            problem.dim()
        )));
    }
    if k == g.n_steps() {
        let u = problem.phi.averaged(bg.terminal_atoms(), problem.dim(), x);
        return Ok(ValueEstimate {
            t: g.t1(),
            u,
            u_mean: u,
            std_error: 0.0,
            misspecified: false,
        });
    }
    let (cloud, bundle) = conditional_flow(
        problem,
        bg,
        k,
        &InitialCondition::Point(x.to_vec()),
        sim.flow_paths,
        seed,
    )?;
    let pair = solve_flow_bsde(problem, bg, k, &cloud, &bundle, &sim.picard)?;
    let slices = bg.slices_from(k);
    let averaged: Vec<_> = (0..slices.len())
        .map(|j| problem.driver.averaged_at(g.node(k + j), slices[j]))
        .collect();
    let gfn = |j: usize, _: usize, xs: &[f64], y: f64, z: &[f64]| averaged[j].eval(xs, y, z);
    Ok(estimate(
        &pair,
        &cloud,
        &gfn,
        sim.bootstrap_resamples,
        seed ^ 0x5eed,
    ))
}

/// Which `y` enters the semigroup driver.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SemigroupVariant {
    /// `y` slot filled from the separately solved `Y^{t,x}` (at the point
    /// where its explicit driver was evaluated); only `Z` is solved for.
    Paper,
    /// `y` slot filled from the semigroup's own solution. Not the paper's
    /// definition; kept for exploration.
    SelfReferential,
}

/// `G^{t,x}_{t, t+δ}[η(X_{t+δ}^{t,x})]` with `δ = delta_steps` grid steps.
pub fn backward_semigroup(
    problem: &MarkovProblem,
    bg: &MeanFieldBackground,
    k: usize,
    x: &[f64],
    delta_steps: usize,
    eta: &(dyn Fn(&[f64]) -> f64 + Sync),
    sim: &MarkovSim,
    variant: SemigroupVariant,
) -> Result<ValueEstimate> {
    backward_semigroup_seeded(
        problem,
        bg,
        k,
        x,
        delta_steps,
        eta,
        sim,
        variant,
        sim.flow_seed,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn backward_semigroup_seeded(
    problem: &MarkovProblem,
    bg: &MeanFieldBackground,
    k: usize,
    x: &[f64],
    delta_steps: usize,
    eta: &(dyn Fn(&[f64]) -> f64 + Sync),
    sim: &MarkovSim,
    variant: SemigroupVariant,
    seed: u64,
) -> Result<ValueEstimate> {
    let g = bg.grid();
    if k + delta_steps > g.n_steps() {
        return Err(Error::InvalidArgument(format!(
            "t + δ runs past T: node {k} + {delta_steps} steps > {}",
            g.n_steps()
        )));
    }
    if delta_steps == 0 {
        let u = eta(x);
        return Ok(ValueEstimate {
            t: g.node(k),
            u,
            u_mean: u,
            std_error: 0.0,
            misspecified: false,
        });
    }
    let n = problem.dim();
    let init = InitialCondition::Point(x.to_vec());
    let (cloud, bundle) = conditional_flow(problem, bg, k, &init, sim.flow_paths, seed)?;
    let full = solve_flow_bsde(problem, bg, k, &cloud, &bundle, &sim.picard)?;

    // The short bundle reuses the same stream: its increments are the first
    // `delta_steps` of the long one.
    let short_grid = TimeGrid::new(g.node(k), g.node(k + delta_steps), delta_steps)?;
    let short_bundle = sample_brownian(short_grid, problem.forward.d, sim.flow_paths, seed)?;
    let m = sim.flow_paths;
    let short_states = cloud_prefix(&cloud, delta_steps);
    let short_cloud = ParticleCloud::from_states(
        short_grid,
        n,
        m,
        short_states,
        crate::forward::BundleRef::of(&short_bundle),
        init,
    )?;
    let terminal: Vec<f64> = short_cloud
        .slice(delta_steps)
        .par_chunks(n)
        .map(eta)
        .collect();
    let solver = BackwardSolver::new(&short_cloud, &short_bundle, &sim.picard)?;
    let slices = bg.slices_from(k);
    let averaged: Vec<_> = (0..delta_steps)
        .map(|j| problem.driver.averaged_at(short_grid.node(j), slices[j]))
        .collect();
    let resamples = sim.bootstrap_resamples;
    match variant {
        SemigroupVariant::Paper => {
            let gfn = |j: usize, i: usize, xs: &[f64], _y: f64, z: &[f64]| {
                averaged[j].eval(xs, full.y_hat(i, j), z)
            };
            let pair = solver.sweep(&gfn, &terminal)?;
            Ok(estimate(
                &pair,
                &short_cloud,
                &gfn,
                resamples,
                seed ^ 0x5eed,
            ))
        }
        SemigroupVariant::SelfReferential => {
            let gfn =
                |j: usize, _: usize, xs: &[f64], y: f64, z: &[f64]| averaged[j].eval(xs, y, z);
            let pair = solver.sweep(&gfn, &terminal)?;
            Ok(estimate(
                &pair,
                &short_cloud,
                &gfn,
                resamples,
                seed ^ 0x5eed,
            ))
        }
    }
}

fn cloud_prefix(cloud: &ParticleCloud, steps: usize) -> Vec<f64> {
    let w = cloud.slice(0).len();
    let mut out = Vec::with_capacity((steps + 1) * w);
    for j in 0..=steps {
        out.extend_from_slice(cloud.slice(j));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Probabilistic,
    Pde,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Probabilistic => "probabilistic",
            Self::Pde => "pde",
        }
    }
}

/// `u` on a tensor grid of time nodes by 1-D space nodes, linear in `x`
/// between nodes. Values are stored time-major.
#[derive(Clone, Debug, Serialize)]
pub struct ValueSurface {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub provenance: Provenance,
}

/// Point lookup on a surface slice.
#[derive(Clone, Copy, Debug)]
pub struct Interpolated {
    pub value: f64,
    pub extrapolated: bool,
}

impl ValueSurface {
    pub fn new(
        times: Vec<f64>,
        xs: Vec<f64>,
        values: Vec<f64>,
        std_errors: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        if xs.len() < 2 || times.is_empty() {
            return Err(Error::InvalidArgument(
                "surface needs at least one time node and two space nodes".into(),
            ));
        }
        if values.len() != times.len() * xs.len() || std_errors.len() != values.len() {
            return Err(Error::InvalidArgument(format!(
                "surface values: {} entries for {} x {} nodes",
                values.len(),
                times.len(),
                xs.len()
            )));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) || times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("surface nodes must increase".into()));
        }
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "value surface",
                path: p % xs.len(),
                step: p / xs.len(),
            });
        }
        Ok(Self {
            times,
            xs,
            values,
            std_errors,
            provenance,
        })
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_space(&self) -> usize {
        self.xs.len()
    }

    pub fn value(&self, ti: usize, xi: usize) -> f64 {
        self.values[ti * self.xs.len() + xi]
    }

    pub fn std_error(&self, ti: usize, xi: usize) -> f64 {
        self.std_errors[ti * self.xs.len() + xi]
    }

    pub fn slice(&self, ti: usize) -> &[f64] {
        let w = self.xs.len();
        &self.values[ti * w..(ti + 1) * w]
    }

    pub fn time_index(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|&s| (s - t).abs() <= 1e-9)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.xs[0] - 1e-12 && x <= self.xs[self.xs.len() - 1] + 1e-12
    }

    /// Linear interpolation on slice `ti`; outside the nodes the end segment is
    /// extended.
    pub fn interp_slice(&self, ti: usize, x: f64) -> Interpolated {
        interp_linear(&self.xs, self.slice(ti), x)
    }

    pub fn interp(&self, t: f64, x: f64) -> Result<Interpolated> {
        let ti = self
            .time_index(t)
            .ok_or_else(|| Error::InvalidArgument(format!("time {t} is not a surface node")))?;
        Ok(self.interp_slice(ti, x))
    }

    /// `h²/8 · max|u''|` on slice `ti`, with `u''` from second differences.
    pub fn interpolation_bound(&self, ti: usize) -> f64 {
        let u = self.slice(ti);
        u.windows(3)
            .map(|w| (w[0] - 2.0 * w[1] + w[2]).abs() / 8.0)
            .fold(0.0, f64::max)
    }

    /// Smallest `C` with `|u(t, x)| ≤ C (1 + |x|)` on the nodes.
    pub fn growth_constant(&self) -> f64 {
        let w = self.xs.len();
        self.values
            .iter()
            .enumerate()
            .map(|(p, u)| u.abs() / (1.0 + self.xs[p % w].abs()))
            .fold(0.0, f64::max)
    }

    /// Largest adjacent-node difference quotient in `x`.
    pub fn lipschitz_x(&self) -> f64 {
        let mut c = 0.0f64;
        for ti in 0..self.times.len() {
            let u = self.slice(ti);
            for j in 0..self.xs.len() - 1 {
                c = c.max((u[j + 1] - u[j]).abs() / (self.xs[j + 1] - self.xs[j]));
            }
        }
        c
    }

    /// Restrict to the given nodes, which must be nodes of this surface.
    pub fn restrict(&self, times: &[f64], xs: &[f64]) -> Result<Self> {
        let ti: Vec<usize> = times
            .iter()
            .map(|&t| {
                self.time_index(t)
                    .ok_or_else(|| Error::GridMismatch(format!("time {t} is not a surface node")))
            })
            .collect::<Result<_>>()?;
        let xi: Vec<usize> = xs
            .iter()
            .map(|&x| {
                self.xs
                    .iter()
                    .position(|&s| (s - x).abs() <= 1e-9)
                    .ok_or_else(|| Error::GridMismatch(format!("x = {x} is not a surface node")))
            })
            .collect::<Result<_>>()?;
        let mut values = Vec::with_capacity(ti.len() * xi.len());
        let mut ses = Vec::with_capacity(ti.len() * xi.len());
        for &a in &ti {
            for &b in &xi {
                values.push(self.value(a, b));
                ses.push(self.std_error(a, b));
            }
        }
        Self::new(times.to_vec(), xs.to_vec(), values, ses, self.provenance)
    }
}

pub fn interp_linear(xs: &[f64], u: &[f64], x: f64) -> Interpolated {
    let n = xs.len();
    let extrapolated = x < xs[0] - 1e-12 || x > xs[n - 1] + 1e-12;
    let j = match xs.partition_point(|&s| s <= x) {
        0 => 0,
        p if p >= n => n - 2,
        p => p - 1,
    };
    let w = (x - xs[j]) / (xs[j + 1] - xs[j]);
    Interpolated {
        value: u[j] + w * (u[j + 1] - u[j]),
        extrapolated,
    }
}

/// `count` equally spaced nodes on `[center - half_width, center + half_width]`.
pub fn space_nodes(center: f64, half_width: f64, count: usize) -> Vec<f64> {
    let h = 2.0 * half_width / (count - 1) as f64;
    (0..count)
        .map(|j| center - half_width + h * j as f64)
        .collect()
}

/// Probabilistic surface on background nodes `time_indices` and space nodes
/// `xs` (1-D problems).
pub fn build_value_surface(
    problem: &MarkovProblem,
    bg: &MeanFieldBackground,
    time_indices: &[usize],
    xs: &[f64],
    sim: &MarkovSim,
) -> Result<ValueSurface> {
    if problem.dim() != 1 {
        return Err(Error::InvalidArgument(
            "value surfaces are built for one-dimensional states".into(),
        ));
    }
    let w = xs.len();
    let est: Vec<ValueEstimate> = (0..time_indices.len() * w)
        .into_par_iter()
        .map(|p| value_function(problem, bg, time_indices[p / w], &[xs[p % w]], sim))
        .collect::<Result<_>>()?;
    let times = time_indices.iter().map(|&k| bg.grid().node(k)).collect();
    ValueSurface::new(
        times,
        xs.to_vec(),
        est.iter().map(|e| e.u).collect(),
        est.iter().map(|e| e.std_error).collect(),
        Provenance::Probabilistic,
    )
}

/// One `(t, x, δ)` probe of the dynamic programming identity.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct DppProbe {
    pub t: f64,
    pub x: f64,
    pub delta: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    pub threshold: f64,
    pub extrapolated_paths: usize,
    pub pass: bool,
}

/// `|u(t, x) - G_{t,t+δ}[u(t+δ, X_{t+δ})]|` with the inner `u` read off
/// `surface`. Both sides use independent streams.
pub fn dpp_residual(
    problem: &MarkovProblem,
    bg: &MeanFieldBackground,
    surface: &ValueSurface,
    k: usize,
    x: f64,
    delta_steps: usize,
    sim: &MarkovSim,
) -> Result<DppProbe> {
    let g = bg.grid();
    if !surface.contains(x) {
        return Err(Error::OutsideDomain {
            x,
            lo: surface.xs[0],
            hi: surface.xs[surface.n_space() - 1],
        });
    }
    if k + delta_steps > g.n_steps() {
        return Err(Error::InvalidArgument(format!(
            "t + δ runs past T: node {k} + {delta_steps} steps > {}",
            g.n_steps()
        )));
    }
    let t = g.node(k);
    let delta = g.node(k + delta_steps) - t;
    if delta_steps == 0 {
        return Ok(DppProbe {
            t,
            x,
            delta: 0.0,
            lhs: 0.0,
            rhs: 0.0,
            residual: 0.0,
            threshold: 0.0,
            extrapolated_paths: 0,
            pass: true,
        });
    }
    let ti = surface.time_index(g.node(k + delta_steps)).ok_or_else(|| {
        Error::GridMismatch(format!(
            "t + δ = {} is not a time node of the surface",
            g.node(k + delta_steps)
        ))
    })?;
    let lhs = value_function_seeded(problem, bg, k, &[x], sim, sim.flow_seed)?;
    let extrapolated = std::sync::atomic::AtomicUsize::new(0);
    let eta = |s: &[f64]| {
        let r = surface.interp_slice(ti, s[0]);
        if r.extrapolated {
            extrapolated.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        }
        r.value
    };
    let rhs_seed = sim.flow_seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let rhs = backward_semigroup_seeded(
        problem,
        bg,
        k,
        &[x],
        delta_steps,
        &eta,
        sim,
        SemigroupVariant::Paper,
        rhs_seed,
    )?;
    let mc = (lhs.std_error.powi(2) + rhs.std_error.powi(2)).sqrt();
    let threshold = 3.0 * (mc + surface.interpolation_bound(ti));
    let residual = (lhs.u - rhs.u).abs();
    Ok(DppProbe {
        t,
        x,
        delta,
        lhs: lhs.u,
        rhs: rhs.u,
        residual,
        threshold,
        extrapolated_paths: extrapolated.into_inner(),
        pass: residual <= threshold,
    })
}

/// Random `(t, x, δ)` probes of the dynamic programming identity.
#[derive(Clone, Debug, Serialize)]
pub struct DppSuiteReport {
    pub probes: Vec<DppProbe>,
    pub pass_fraction: f64,
    pub required_fraction: f64,
    pub pass: bool,
}

/// `count` probes with `t + δ` on a surface time node, `δ` between one grid
/// step and the gap to the previous surface node, and `x` uniform on the
/// inner 90% of the surface's space range.
pub fn dpp_probe_suite(
    problem: &MarkovProblem,
    bg: &MeanFieldBackground,
    surface: &ValueSurface,
    count: usize,
    seed: u64,
    sim: &MarkovSim,
) -> Result<DppSuiteReport> {
    use rand::{Rng, SeedableRng};
    let g = bg.grid();
    let nodes: Vec<usize> = surface
        .times
        .iter()
        .map(|&t| {
            g.index_of(t)
                .ok_or_else(|| Error::GridMismatch(format!("surface time {t} is not a grid node")))
        })
        .collect::<Result<_>>()?;
    if nodes.len() < 2 {
        return Err(Error::InvalidArgument("DPP probes need two surface time nodes".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let lo = surface.xs[0];
    let hi = surface.xs[surface.n_space() - 1];
    let (a, b) = (lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo));
    let specs: Vec<(usize, f64, usize)> = (0..count)
        .map(|_| {
            let j = rng.random_range(1..nodes.len());
            let gap = nodes[j] - nodes[j - 1];
            let delta = rng.random_range(1..=gap);
            (nodes[j] - delta, rng.random_range(a..b), delta)
        })
        .collect();
    let probes: Vec<DppProbe> = specs
        .into_par_iter()
        .enumerate()
        .map(|(i, (k, x, delta))| {
            let local = MarkovSim {
                flow_seed: sim.flow_seed.wrapping_add(1 + i as u64),
                ..sim.clone()
            };
            dpp_residual(problem, bg, surface, k, x, delta, &local)
        })
        .collect::<Result<_>>()?;
    let passed = probes.iter().filter(|p| p.pass).count();
    let pass_fraction = passed as f64 / count.max(1) as f64;
    Ok(DppSuiteReport {
        probes,
        pass_fraction,
        required_fraction: 0.95,
        pass: pass_fraction >= 0.95,
    })
}

/// Fitted regularity of a surface.
#[derive(Clone, Debug, Serialize)]
pub struct RegularityReport {
    pub lipschitz_x: f64,
    pub growth_c: f64,
    /// `None` when the surface does not move in time.
    pub holder_t: Option<SlopeFit>,
    pub flat: bool,
    pub lags: Vec<f64>,
    pub sup_differences: Vec<f64>,
    /// `log10(max lag / min lag)` of the fitted points.
    pub decades: f64,
}

/// Lipschitz constant in `x`, growth constant and a log-log fit of
/// `sup_x |u(t, x) - u(t', x)| / (1 + |x|)` against `|t - t'|`.
pub fn regularity_probe(surface: &ValueSurface) -> Result<RegularityReport> {
    let nt = surface.n_times();
    if nt < 8 {
        return Err(Error::InvalidArgument(format!(
            "regularity probe needs at least 8 time nodes, surface has {nt}"
        )));
    }
    let mut lag_steps = Vec::new();
    let mut l = 1usize;
    while l < nt - 1 {
        lag_steps.push(l);
        l *= 2;
    }
    lag_steps.push(nt - 1);
    let w = surface.n_space();
    let scale = surface.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut lags = Vec::new();
    let mut sups = Vec::new();
    for &l in &lag_steps {
        let mut sup = 0.0f64;
        let mut gap = 0.0f64;
        for a in 0..nt - l {
            gap = gap.max(surface.times[a + l] - surface.times[a]);
            for j in 0..w {
                let d = (surface.value(a, j) - surface.value(a + l, j)).abs()
                    / (1.0 + surface.xs[j].abs());
                sup = sup.max(d);
            }
        }
        lags.push(gap);
        sups.push(sup);
    }
    let flat = sups.iter().all(|&s| s <= 1e-12 * (1.0 + scale));
    let (fx, fy): (Vec<f64>, Vec<f64>) = lags
        .iter()
        .zip(&sups)
        .filter(|(_, &s)| s > 1e-12 * (1.0 + scale))
        .map(|(&a, &b)| (a, b))
        .unzip();
    let holder_t = if flat || fx.len() < 3 {
        None
    } else {
        Some(loglog_slope(&fx, &fy)?)
    };
    let decades = if fx.len() >= 2 {
        (fx[fx.len() - 1] / fx[0]).log10()
    } else {
        0.0
    };
    Ok(RegularityReport {
        lipschitz_x: surface.lipschitz_x(),
        growth_c: surface.growth_constant(),
        holder_t,
        flat,
        lags,
        sup_differences: sups,
        decades,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::DriverFlags;
    use crate::forward::LawCoupling;

    const FLAGS: DriverFlags = DriverFlags {
        independent_of_zprime: true,
        nondecreasing_in_yprime: true,
    };

    fn brownian_forward() -> ForwardCoefficients {
        ForwardCoefficients::scalar(|_, _, _| 0.0, |_, _, _| 1.0, LawCoupling::Free, 0.0, 1.0)
    }

    fn sim(paths: usize, steps: usize) -> MarkovSim {
        MarkovSim {
            n_steps: steps,
            background_paths: paths,
            flow_paths: paths,
            ..Default::default()
        }
    }

    fn problem(driver: Driver, phi: TerminalCost) -> MarkovProblem {
        MarkovProblem::new(brownian_forward(), driver, phi, vec![0.0], 1.0).unwrap()
    }

    fn y_prime_driver() -> Driver {
        Driver::separable(
            |_, _, _, _| 0.0,
            Some(Arc::new(|_, _, yp, _| yp)),
            1.0,
            FLAGS,
        )
    }

    #[test]
    fn zero_data_zero_background() {
        let p = problem(Driver::zero(), TerminalCost::local(|_| 0.0));
        let bg = build_background(&p, &sim(500, 8)).unwrap();
        for k in 0..=8 {
            assert!(bg.pair.y_slice(k).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_background_matches_discrete_ode() {
        let phi = TerminalCost::Separable {
            local: Arc::new(|_| 0.0),
            law: Some(Arc::new(|xp| xp[0] + 1.0)),
        };
        let p = problem(y_prime_driver(), phi);
        let s = sim(2000, 16);
        let bg = build_background(&p, &s).unwrap();
        let xi = bg.pair.y(0, 16);
        let dt = 1.0 / 16.0;
        for k in 0..=16 {
            let want = xi * (1.0f64 - dt).powi(-(16 - k as i32));
            assert!(
                (bg.pair.mean_y(k) - want).abs() < 1e-5 * want.abs(),
                "node {k}"
            );
            assert!((xi * (1.0 - k as f64 / 16.0).exp() - want).abs() < 0.1 * want.abs());
        }
    }

    #[test]
    fn terminal_value_is_atom_average() {
        let phi = TerminalCost::General(Arc::new(|xp, x| (xp[0] - x[0]).abs()));
        let p = problem(Driver::zero(), phi.clone());
        let bg = build_background(&p, &sim(300, 4)).unwrap();
        let u = value_function(&p, &bg, 4, &[0.3], &sim(300, 4)).unwrap();
        let atoms = bg.cloud.slice(4);
        let want = atoms.iter().map(|a| (a - 0.3).abs()).sum::<f64>() / 300.0;
        assert!((u.u - want).abs() < 1e-13);
    }

    #[test]
    fn martingale_terminal() {
        let p = problem(Driver::zero(), TerminalCost::local(|x| x[0]));
        let s = sim(4000, 8);
        let bg = build_background(&p, &s).unwrap();
        for (k, x) in [(0, -0.7), (3, 0.2), (7, 1.5)] {
            let u = value_function(&p, &bg, k, &[x], &s).unwrap();
            assert!((u.u - x).abs() < 4.0 * u.std_error + 1e-12, "{k} {x} {u:?}");
            assert!(!u.misspecified);
        }
    }

    #[test]
    fn heat_closed_form() {
        let p = problem(Driver::zero(), TerminalCost::local(|x| x[0] * x[0]));
        let s = sim(20_000, 8);
        let bg = build_background(&p, &s).unwrap();
        for (k, x) in [(0, 0.0), (2, 0.8), (6, -1.0)] {
            let u = value_function(&p, &bg, k, &[x], &s).unwrap();
            let want = x * x + 1.0 - k as f64 / 8.0;
            assert!((u.u - want).abs() < 4.0 * u.std_error, "{k} {x} {u:?}");
        }
    }

    #[test]
    fn short_bundle_is_prefix_of_long() {
        let long = sample_brownian(TimeGrid::new(0.25, 1.0, 12).unwrap(), 1, 50, 9).unwrap();
        let short = sample_brownian(TimeGrid::new(0.25, 0.5, 4).unwrap(), 1, 50, 9).unwrap();
        for i in 0..50 {
            for k in 0..4 {
                assert_eq!(long.increment(i, k), short.increment(i, k));
            }
        }
    }

    #[test]
    fn semigroup_of_constant_is_quadrature() {
        let p = problem(y_prime_driver(), TerminalCost::local(|x| x[0].sin()));
        let s = sim(1000, 16);
        let bg = build_background(&p, &s).unwrap();
        let (k, delta) = (4, 6);
        let g = backward_semigroup(
            &p,
            &bg,
            k,
            &[0.4],
            delta,
            &|_| 2.5,
            &s,
            SemigroupVariant::Paper,
        )
        .unwrap();
        let dt = 1.0 / 16.0;
        let want = 2.5 + (k..k + delta).map(|j| bg.pair.mean_y(j) * dt).sum::<f64>();
        assert!((g.u - want).abs() < 1e-12, "{} {want}", g.u);
        assert!(g.std_error < 1e-12);
    }

    #[test]
    fn semigroup_zero_length_returns_eta() {
        let p = problem(y_prime_driver(), TerminalCost::local(|x| x[0]));
        let s = sim(200, 4);
        let bg = build_background(&p, &s).unwrap();
        let g = backward_semigroup(
            &p,
            &bg,
            2,
            &[0.9],
            0,
            &|x| x[0] * 3.0,
            &s,
            SemigroupVariant::Paper,
        )
        .unwrap();
        assert_eq!(g.u, 2.7);
    }

    #[test]
    fn martingale_semigroup_returns_start() {
        let p = problem(Driver::zero(), TerminalCost::local(|x| x[0]));
        let s = sim(4000, 8);
        let bg = build_background(&p, &s).unwrap();
        let g = backward_semigroup(
            &p,
            &bg,
            2,
            &[0.6],
            4,
            &|x| x[0],
            &s,
            SemigroupVariant::Paper,
        )
        .unwrap();
        assert!((g.u - 0.6).abs() < 4.0 * g.std_error);
    }

    #[test]
    fn full_semigroup_matches_value_function() {
        let local =
            |_: f64, x: &[f64], y: f64, z: &[f64]| 0.3 * y.sin() + 0.2 * z[0] + 0.1 * x[0].cos();
        let driver = Driver::separable(
            local,
            Some(Arc::new(|_, _, yp, _| 0.5 * yp.tanh())),
            0.5,
            FLAGS,
        );
        let p = problem(driver, TerminalCost::local(|x| x[0].cos()));
        let s = sim(4000, 16);
        let bg = build_background(&p, &s).unwrap();
        let phi = p.phi.clone();
        let atoms = bg.cloud.slice(16).to_vec();
        let eta = move |x: &[f64]| phi.averaged(&atoms, 1, x);
        let u = value_function(&p, &bg, 3, &[0.2], &s).unwrap();
        let g =
            backward_semigroup(&p, &bg, 3, &[0.2], 13, &eta, &s, SemigroupVariant::Paper).unwrap();
        assert!((u.u - g.u).abs() < 1e-10, "{} {}", u.u, g.u);
    }

    #[test]
    fn dpp_zero_delta_and_domain() {
        let p = problem(Driver::zero(), TerminalCost::local(|x| x[0]));
        let s = sim(500, 8);
        let bg = build_background(&p, &s).unwrap();
        let xs = space_nodes(0.0, 1.0, 5);
        let surf = build_value_surface(&p, &bg, &[4, 8], &xs, &s).unwrap();
        assert_eq!(
            dpp_residual(&p, &bg, &surf, 4, 0.5, 0, &s)
                .unwrap()
                .residual,
            0.0
        );
        assert!(matches!(
            dpp_residual(&p, &bg, &surf, 4, 1.5, 4, &s),
            Err(Error::OutsideDomain { .. })
        ));
        let r = dpp_residual(&p, &bg, &surf, 4, 0.5, 4, &s).unwrap();
        assert!(r.pass, "{r:?}");
    }

    fn closed_form_surface(f: impl Fn(f64, f64) -> f64) -> ValueSurface {
        let times: Vec<f64> = (0..=32).map(|k| k as f64 / 32.0).collect();
        let xs = space_nodes(0.0, 2.0, 41);
        let values = times
            .iter()
            .flat_map(|&t| xs.iter().map(move |&x| (t, x)))
            .map(|(t, x)| f(t, x))
            .collect();
        let n = times.len() * xs.len();
        ValueSurface::new(times, xs, values, vec![0.0; n], Provenance::Probabilistic).unwrap()
    }

    #[test]
    fn regularity_of_heat_is_one() {
        let r = regularity_probe(&closed_form_surface(|t, x| x * x + 1.0 - t)).unwrap();
        let fit = r.holder_t.unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-9, "{fit:?}");
        assert!(r.decades >= 1.5);
        assert!((r.lipschitz_x - 3.9).abs() < 1e-9);
    }

    #[test]
    fn regularity_of_abs_terminal() {
        let u = |t: f64, x: f64| {
            let s = 1.0 - t;
            if s <= 0.0 {
                return x.abs();
            }
            let r = s.sqrt();
            let z = x / r;
            2.0 * r * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
                + x * (2.0 * crate::stats::normal_cdf(z) - 1.0)
        };
        let fit = regularity_probe(&closed_form_surface(u))
            .unwrap()
            .holder_t
            .unwrap();
        assert!((0.35..=1.0).contains(&fit.slope), "{fit:?}");
    }

    #[test]
    fn flat_surface_sentinel() {
        let r = regularity_probe(&closed_form_surface(|_, _| 1.0)).unwrap();
        assert!(r.flat && r.holder_t.is_none());
        let short = closed_form_surface(|_, _| 1.0)
            .restrict(&[0.0, 0.5], &[0.0, 1.0])
            .unwrap();
        assert!(regularity_probe(&short).is_err());
    }

    #[test]
    fn interpolation_flags_extrapolation() {
        let xs = [0.0, 1.0, 2.0];
        let u = [0.0, 1.0, 4.0];
        let a = interp_linear(&xs, &u, 1.5);
        assert!((a.value - 2.5).abs() < 1e-15 && !a.extrapolated);
        let b = interp_linear(&xs, &u, 3.0);
        assert!((b.value - 7.0).abs() < 1e-15 && b.extrapolated);
        let c = interp_linear(&xs, &u, -1.0);
        assert!((c.value + 1.0).abs() < 1e-15 && c.extrapolated);
    }
}
