//! Comparison of mean-field BSDEs: a hypothesis-gated property suite, the two
//! classical counterexamples, and consistency of the converse statement.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::brownian::{sample_brownian, BrownianBundle};
use crate::bsde::{
    contraction_report, solve_meanfield_bsde, BsdePair, ContractionReport, Driver, DriverArgs, DriverFlags, DriverForm, PicardConfig,
    TerminalFunctional,
};
use crate::error::{Error, Result};
use crate::forward::ParticleCloud;
use crate::grid::TimeGrid;
use crate::parallel::chunked_mean;
use crate::regression::Regressor;
use crate::stats::normal_cdf;

/// Two mean-field BSDEs on the same Brownian motion. The declared orderings
/// are `ξ₁ ≤ ξ₂` and `f₁ ≤ f₂`.
#[derive(Clone, Debug)]
pub struct ComparisonScenario {
    pub id: String,
    pub drivers: (Driver, Driver),
    pub terminals: (TerminalFunctional, TerminalFunctional),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ComparisonSim {
    pub horizon: f64,
    pub n_steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub picard: PicardConfig,
    pub bootstrap_resamples: usize,
    pub bootstrap_seed: u64,
    /// Random probes per hypothesis check.
    pub probes: usize,
    /// Threshold never drops below this (rounding of exactly equal data).
    pub threshold_floor: f64,
}

impl Default for ComparisonSim {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            n_steps: 16,
            n_paths: 4000,
            seed: 0,
            picard: PicardConfig::default(),
            bootstrap_resamples: 200,
            bootstrap_seed: 7,
            probes: 1000,
            threshold_floor: 1e-9,
        }
    }
}

impl ComparisonSim {
    fn state(&self) -> Result<(ParticleCloud, BrownianBundle)> {
        let grid = TimeGrid::new(0.0, self.horizon, self.n_steps)?;
        let bundle = sample_brownian(grid, 1, self.n_paths, self.seed)?;
        let cloud = ParticleCloud::brownian(&bundle)?;
        Ok((cloud, bundle))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct HypothesisCheck {
    pub zprime_free: (bool, bool),
    pub yprime_nondecreasing: (bool, bool),
    pub driver_order_violations: usize,
    pub terminal_order_violations: usize,
}

impl HypothesisCheck {
    /// Condition (i) and (ii) each met by at least one driver, orderings intact.
    pub fn compliant(&self) -> bool {
        (self.zprime_free.0 || self.zprime_free.1)
            && (self.yprime_nondecreasing.0 || self.yprime_nondecreasing.1)
            && self.driver_order_violations == 0
            && self.terminal_order_violations == 0
    }
}

/// Probes both drivers against their declared flags and checks `f₁ ≤ f₂` on
/// random arguments and `ξ₁ ≤ ξ₂` on every simulated path.
pub fn check_hypotheses(
    sc: &ComparisonScenario,
    xi: (&[f64], &[f64]),
    sim: &ComparisonSim,
) -> Result<HypothesisCheck> {
    let (f1, f2) = (&sc.drivers.0, &sc.drivers.1);
    f1.probe(1, 1, sim.horizon, 3.0, sim.probes, sim.seed ^ 0x51)?;
    f2.probe(1, 1, sim.horizon, 3.0, sim.probes, sim.seed ^ 0x52)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed ^ 0x53);
    let mut order = 0;
    for _ in 0..sim.probes {
        let mut r = || rng.random_range(-3.0..3.0);
        let (xp, x, zp, z) = ([r()], [r()], [r()], [r()]);
        let (yp, y) = (r(), r());
        let t = rng.random_range(0.0..=sim.horizon);
        let a = DriverArgs {
            t,
            x_prime: &xp,
            x: &x,
            y_prime: yp,
            y,
            z_prime: &zp,
            z: &z,
        };
        if f1.eval(&a) > f2.eval(&a) + 1e-12 {
            order += 1;
        }
    }
    let term = xi.0.iter().zip(xi.1).filter(|(a, b)| a > b).count();
    Ok(HypothesisCheck {
        zprime_free: (
            f1.flags.independent_of_zprime,
            f2.flags.independent_of_zprime,
        ),
        yprime_nondecreasing: (
            f1.flags.nondecreasing_in_yprime,
            f2.flags.nondecreasing_in_yprime,
        ),
        driver_order_violations: order,
        terminal_order_violations: term,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonEntry {
    pub scenario_id: String,
    /// `max (Y¹ − Y²)⁺` over paths and nodes.
    pub violation_measure: f64,
    pub threshold: f64,
    pub pass: bool,
    /// Picard gap ratios of the two solves, slack 0.1.
    pub contraction: [ContractionReport; 2],
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonSuiteReport {
    pub entries: Vec<ComparisonEntry>,
    pub violations: usize,
    pub all_pass: bool,
}

/// Largest bootstrap standard error, over paths and nodes, of the
/// regression estimate of `Y¹ − Y²`: at node `k` the regression of
/// `Y¹_{k+1} − Y²_{k+1}` on the state is refitted on resampled path sets.
pub fn bootstrap_threshold_se(
    p1: &BsdePair,
    p2: &BsdePair,
    cloud: &ParticleCloud,
    degree: usize,
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 0..p1.grid().n_steps() {
        let states = cloud.slice(k);
        let reg = Regressor::fit(states, cloud.dim(), degree, k)?;
        let diff: Vec<f64> = p1
            .y_slice(k + 1)
            .iter()
            .zip(p2.y_slice(k + 1))
            .map(|(u, v)| u - v)
            .collect();
        let se =
            reg.bootstrap_prediction_se(states, &diff, resamples, seed.wrapping_add(k as u64))?;
        worst = se.iter().cloned().fold(worst, f64::max);
    }
    Ok(worst)
}

pub fn violation_measure(p1: &BsdePair, p2: &BsdePair) -> f64 {
    let mut v: f64 = 0.0;
    for k in 0..p1.grid().n_nodes() {
        for (a, b) in p1.y_slice(k).iter().zip(p2.y_slice(k)) {
            v = v.max(a - b);
        }
    }
    v
}

/// Solves both equations of a scenario on one shared bundle, without any
/// hypothesis gate.
pub fn solve_pair(
    sc: &ComparisonScenario,
    cloud: &ParticleCloud,
    bundle: &BrownianBundle,
    picard: &PicardConfig,
) -> Result<(BsdePair, BsdePair, Vec<f64>, Vec<f64>)> {
    let xi1 = sc.terminals.0.evaluate(cloud, bundle)?;
    let xi2 = sc.terminals.1.evaluate(cloud, bundle)?;
    let p1 = solve_meanfield_bsde(&sc.drivers.0, &xi1, cloud, bundle, picard)?;
    let p2 = solve_meanfield_bsde(&sc.drivers.1, &xi2, cloud, bundle, picard)?;
    Ok((p1, p2, xi1, xi2))
}

fn entry_for(
    sc: &ComparisonScenario,
    p1: &BsdePair,
    p2: &BsdePair,
    cloud: &ParticleCloud,
    sim: &ComparisonSim,
) -> Result<ComparisonEntry> {
    let v = violation_measure(p1, p2);
    let se = bootstrap_threshold_se(
        p1,
        p2,
        cloud,
        sim.picard.regression_degree,
        sim.bootstrap_resamples,
        sim.bootstrap_seed,
    )?;
    let threshold = (3.0 * se).max(sim.threshold_floor);
    Ok(ComparisonEntry {
        scenario_id: sc.id.clone(),
        violation_measure: v,
        threshold,
        pass: v <= threshold,
        contraction: [
            contraction_report(&p1.diagnostics, 0.1),
            contraction_report(&p2.diagnostics, 0.1),
        ],
    })
}

/// Runs every scenario on one shared bundle. A scenario whose hypotheses fail
/// the probes is rejected before anything is solved.
pub fn run_comparison_suite(
    scenarios: &[ComparisonScenario],
    sim: &ComparisonSim,
) -> Result<ComparisonSuiteReport> {
    let (cloud, bundle) = sim.state()?;
    let entries: Vec<ComparisonEntry> = scenarios
        .par_iter()
        .map(|sc| -> Result<ComparisonEntry> {
            let xi1 = sc.terminals.0.evaluate(&cloud, &bundle)?;
            let xi2 = sc.terminals.1.evaluate(&cloud, &bundle)?;
            let h = check_hypotheses(sc, (&xi1, &xi2), sim)?;
            if !h.compliant() {
                return Err(Error::Hypothesis(format!(
                    "scenario {} does not meet the comparison hypotheses: {h:?}",
                    sc.id
                )));
            }
            let p1 = solve_meanfield_bsde(&sc.drivers.0, &xi1, &cloud, &bundle, &sim.picard)?;
            let p2 = solve_meanfield_bsde(&sc.drivers.1, &xi2, &cloud, &bundle, &sim.picard)?;
            entry_for(sc, &p1, &p2, &cloud, sim)
        })
        .collect::<Result<_>>()?;
    let violations = entries.iter().filter(|e| !e.pass).count();
    Ok(ComparisonSuiteReport {
        all_pass: violations == 0,
        violations,
        entries,
    })
}

fn flags(z_free: bool, nondecreasing: bool) -> DriverFlags {
    DriverFlags {
        independent_of_zprime: z_free,
        nondecreasing_in_yprime: nondecreasing,
    }
}

/// A random scenario meeting the comparison hypotheses by construction.
///
/// Both drivers share `a·(y')⁺ + α y + γ z + κ sin y + ρ cos x`; driver 2
/// adds a constant `c ≥ 0`. Depending on the draw, driver 1 additionally
/// carries a `z'`-dependent piece `b(sin z' − 1) ≤ 0` or a non-monotone
/// `y'`-piece `e(cos y' − 1) ≤ 0`, so (i) or (ii) is then met by driver 2
/// only. Terminals are `ξ₁ = h(B_T)` and `ξ₂ = ξ₁ + δ(B_T)` with `δ ≥ 0`.
pub fn random_compliant_scenario(seed: u64, index: usize) -> ComparisonScenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let a = u(0.0, 0.5);
    let alpha = u(-0.5, 0.5);
    let gamma = u(-0.5, 0.5);
    let kappa = u(0.0, 0.3);
    let rho = u(-0.5, 0.5);
    let c = u(0.0, 0.3);
    let variant = (u(0.0, 3.0)) as usize;
    let b = u(0.0, 0.3);
    let e = u(0.0, 0.3);
    let (p0, p1, p2, p3) = (u(-1.0, 1.0), u(-1.0, 1.0), u(-0.5, 0.5), u(-1.0, 1.0));
    let (q0, q1) = (u(0.0, 0.3), u(0.0, 0.5));
    let equal_terminals = u(0.0, 1.0) < 0.2;

    let local = move |_t: f64, x: &[f64], y: f64, z: &[f64]| {
        alpha * y + gamma * z[0] + kappa * y.sin() + rho * x[0].cos()
    };
    let base_c = a.abs() + alpha.abs() + gamma.abs() + kappa;
    let (coupling1, c1, fl1): (crate::bsde::CouplingFn, f64, DriverFlags) = match variant {
        0 => (
            Arc::new(move |_, _, yp: f64, _| a * yp.max(0.0)),
            base_c,
            flags(true, true),
        ),
        1 => (
            Arc::new(move |_, _, yp: f64, zp: &[f64]| a * yp.max(0.0) + b * (zp[0].sin() - 1.0)),
            base_c + b,
            flags(false, true),
        ),
        _ => (
            Arc::new(move |_, _, yp: f64, _| a * yp.max(0.0) + e * (yp.cos() - 1.0)),
            base_c + e,
            flags(true, false),
        ),
    };
    let f1 = Driver::separable(local, Some(coupling1), c1, fl1);
    let f2 = Driver::separable(
        move |t, x, y, z| local(t, x, y, z) + c,
        Some(Arc::new(move |_, _, yp: f64, _| a * yp.max(0.0))),
        base_c,
        flags(true, true),
    );
    let h = move |x: f64| p0 + p1 * x + p2 * (2.0 * x).sin() + p3 * x.max(0.0);
    let delta = move |x: f64| {
        if equal_terminals {
            0.0
        } else {
            q0 + q1 * x * x / (1.0 + x * x)
        }
    };
    ComparisonScenario {
        id: format!("battery-{seed}-{index}"),
        drivers: (f1, f2),
        terminals: (
            TerminalFunctional::of_terminal_state(move |s| h(s[0])),
            TerminalFunctional::of_terminal_state(move |s| h(s[0]) + delta(s[0])),
        ),
    }
}

pub fn random_battery(seed: u64, count: usize) -> Vec<ComparisonScenario> {
    (0..count)
        .map(|i| random_compliant_scenario(seed, i))
        .collect()
}

/// `Y₀` of the `f = −z'`, `ξ = −(B₁⁺)³` equation.
pub fn example_3_1_y0() -> f64 {
    1.5 - 2.0 / (2.0 * PI).sqrt()
}

/// `P((B₁)² < 1 − e^{−1})`.
pub fn example_3_2_negative_probability() -> f64 {
    2.0 * normal_cdf((1.0 - (-1.0f64).exp()).sqrt()) - 1.0
}

#[derive(Clone, Debug, Serialize)]
pub struct CurvePoint {
    pub t: f64,
    pub mean_y: f64,
    pub reference: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ZprimeCounterexample {
    pub y0_first: f64,
    pub y0_second: f64,
    pub y0_reference: f64,
    pub y0_rel_error: f64,
    pub y0_within: bool,
    pub second_is_zero: bool,
    /// `E[Z_t]` at interior nodes against `−3/2`.
    pub mean_z: Vec<CurvePoint>,
    pub worst_z_rel_error: f64,
    pub z_within: bool,
    pub violation_measure: f64,
    /// Comparison fails although `ξ₁ ≤ ξ₂` and `P(ξ₁ < ξ₂) > 0`.
    pub comparison_violated: bool,
    pub curve: Vec<CurvePoint>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CounterexampleTolerances {
    pub y_rel: f64,
    pub z_rel: f64,
    pub prob_abs: f64,
    /// Sup-norm bound for the per-path closed form on `[1, 2]`.
    pub path_abs: f64,
}

impl Default for CounterexampleTolerances {
    fn default() -> Self {
        Self {
            y_rel: 0.02,
            z_rel: 0.03,
            prob_abs: 0.02,
            path_abs: 0.02,
        }
    }
}

fn zprime_driver() -> Driver {
    Driver::separable(
        |_, _, _, _| 0.0,
        Some(Arc::new(|_, _, _, zp: &[f64]| -zp[0])),
        1.0,
        flags(false, true),
    )
}

fn yprime_driver() -> Driver {
    Driver::separable(
        |_, _, _, _| 0.0,
        Some(Arc::new(|_, _, yp: f64, _| -yp)),
        1.0,
        flags(true, false),
    )
}

/// `f = −z'` with `ξ₁ = −(B₁⁺)³`, `ξ₂ = 0`, `T = 1`.
pub fn zprime_scenario() -> ComparisonScenario {
    ComparisonScenario {
        id: "counterexample-zprime".into(),
        drivers: (zprime_driver(), zprime_driver()),
        terminals: (
            TerminalFunctional::of_terminal_state(|s| -s[0].max(0.0).powi(3)),
            TerminalFunctional::constant(0.0),
        ),
    }
}

/// `f = −y'` on `[0, 2]` with `ξ₁ = (B₁)²`, `ξ₂ = 0`. The suite convention is
/// "first ≤ second" in the data, so the pair is stored as `(0, (B₁)²)`.
pub fn yprime_scenario(one_index: usize) -> ComparisonScenario {
    ComparisonScenario {
        id: "counterexample-yprime".into(),
        drivers: (yprime_driver(), yprime_driver()),
        terminals: (
            TerminalFunctional::constant(0.0),
            TerminalFunctional::new(move |v| v.brownian(one_index)[0].powi(2)),
        ),
    }
}

pub fn counterexample_zprime(
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    picard: &PicardConfig,
    tol: &CounterexampleTolerances,
) -> Result<ZprimeCounterexample> {
    let grid = TimeGrid::new(0.0, 1.0, n_steps)?;
    let bundle = sample_brownian(grid, 1, n_paths, seed)?;
    let cloud = ParticleCloud::brownian(&bundle)?;
    let sc = zprime_scenario();
    let (p1, p2, _, _) = solve_pair(&sc, &cloud, &bundle, picard)?;
    let reference = example_3_1_y0();
    let y0 = p1.mean_y(0);
    let y0_second = p2.mean_y(0);
    let rel = (y0 / reference - 1.0).abs();
    let mean_z: Vec<CurvePoint> = (1..n_steps)
        .map(|k| CurvePoint {
            t: grid.node(k),
            mean_y: p1.mean_z(k)[0],
            reference: -1.5,
        })
        .collect();
    let worst_z = mean_z
        .iter()
        .map(|c| (c.mean_y / c.reference - 1.0).abs())
        .fold(0.0, f64::max);
    // With E[Z] ≡ −3/2 the mean of Y is E[ξ] + (3/2)(1 − t).
    let e_xi = -2.0 / (2.0 * PI).sqrt();
    let curve = (0..=n_steps)
        .map(|k| CurvePoint {
            t: grid.node(k),
            mean_y: p1.mean_y(k),
            reference: e_xi + 1.5 * (1.0 - grid.node(k)),
        })
        .collect();
    let zero_second = (0..=n_steps).all(|k| p2.y_slice(k).iter().all(|v| *v == 0.0));
    Ok(ZprimeCounterexample {
        y0_first: y0,
        y0_second,
        y0_reference: reference,
        y0_rel_error: rel,
        y0_within: rel <= tol.y_rel,
        second_is_zero: zero_second,
        worst_z_rel_error: worst_z,
        z_within: worst_z <= tol.z_rel,
        mean_z,
        violation_measure: violation_measure(&p1, &p2),
        comparison_violated: y0 > y0_second,
        curve,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct YprimeCounterexample {
    pub curve: Vec<CurvePoint>,
    pub worst_rel_error: f64,
    pub curve_within: bool,
    pub negative_probability: f64,
    pub negative_probability_reference: f64,
    pub probability_within: bool,
    /// Largest `|Y_t − ((B₁)² − (1 − e^{−(2−t)}))|` over paths and nodes in `[1, 2]`.
    pub path_sup_error: f64,
    pub path_rms_error: f64,
    pub path_within: bool,
    pub violation_measure: f64,
    /// `P(Y₁¹ < Y₁²) > 0` although `ξ₁ > ξ₂`.
    pub comparison_violated: bool,
}

/// `f = −y'`, `ξ₁ = (B₁)²`, `ξ₂ = 0`, `T = 2`. `n_steps` must be even so
/// that `t = 1` is a node.
pub fn counterexample_decreasing_yprime(
    n_steps: usize,
    n_paths: usize,
    seed: u64,
    picard: &PicardConfig,
    tol: &CounterexampleTolerances,
) -> Result<YprimeCounterexample> {
    if n_steps % 2 != 0 {
        return Err(Error::InvalidArgument(
            "the T = 2 grid needs an even step count so that t = 1 is a node".into(),
        ));
    }
    let grid = TimeGrid::new(0.0, 2.0, n_steps)?;
    let one = n_steps / 2;
    let bundle = sample_brownian(grid, 1, n_paths, seed)?;
    // ξ reads B at t = 1, so the state is B stopped there.
    let cloud = ParticleCloud::brownian_stopped(&bundle, one)?;
    let sc = yprime_scenario(one);
    // Stored as (ξ₂ = 0, ξ₁ = B₁²): `low` is the zero solution.
    let (low, high, _, _) = solve_pair(&sc, &cloud, &bundle, picard)?;
    let curve: Vec<CurvePoint> = (0..=n_steps)
        .map(|k| {
            let t = grid.node(k);
            CurvePoint {
                t,
                mean_y: high.mean_y(k),
                reference: (-(2.0 - t)).exp(),
            }
        })
        .collect();
    let worst = curve
        .iter()
        .map(|c| (c.mean_y / c.reference - 1.0).abs())
        .fold(0.0, f64::max);
    let b1: Vec<f64> = (0..n_paths).map(|i| cloud.state(i, one)[0]).collect();
    let mut sup: f64 = 0.0;
    let mut sq = 0.0;
    let mut count = 0usize;
    for k in one..=n_steps {
        let shift = 1.0 - (-(2.0 - grid.node(k))).exp();
        for (i, y) in high.y_slice(k).iter().enumerate() {
            let e = (y - (b1[i] * b1[i] - shift)).abs();
            sup = sup.max(e);
            sq += e * e;
            count += 1;
        }
    }
    let rms = (sq / count as f64).sqrt();
    let neg = chunked_mean(n_paths, |i| {
        if high.y(i, one) < low.y(i, one) {
            1.0
        } else {
            0.0
        }
    });
    let reference = example_3_2_negative_probability();
    Ok(YprimeCounterexample {
        worst_rel_error: worst,
        curve_within: worst <= tol.y_rel,
        curve,
        negative_probability: neg,
        negative_probability_reference: reference,
        probability_within: (neg - reference).abs() <= tol.prob_abs,
        path_sup_error: sup,
        path_rms_error: rms,
        path_within: sup <= tol.path_abs,
        violation_measure: violation_measure(&low, &high),
        comparison_violated: neg > 0.0,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ConverseReport {
    pub t: f64,
    pub max_abs_difference: f64,
    pub tolerance: f64,
    pub max_driver_residual: f64,
    pub pass: bool,
}

/// Scenario whose data coincide from `t` on: common terminal and driver
/// `base`, plus `φ₁ = c₁ 1{s<t}` and `φ₂ = c₂ 1{s<t}` with `c₁ ≤ c₂`.
pub fn converse_scenario(
    base: &Driver,
    terminal: &TerminalFunctional,
    t: f64,
    c1: f64,
    c2: f64,
) -> ComparisonScenario {
    let step = move |s: f64, c: f64| if s < t - 1e-12 { c } else { 0.0 };
    let perturbed = |c: f64| {
        let mut d = match &base.form {
            DriverForm::Separable { local, coupling } => {
                let local = local.clone();
                Driver::separable(
                    move |s, x, y, z| local(s, x, y, z) + step(s, c),
                    coupling.clone(),
                    base.lipschitz_c,
                    base.flags,
                )
            }
            DriverForm::General(f) => {
                let f = f.clone();
                Driver::general(move |a| f(a) + step(a.t, c), base.lipschitz_c, base.flags)
            }
        };
        d.law_subsample = base.law_subsample;
        d
    };
    ComparisonScenario {
        id: format!("converse-{t}"),
        drivers: (perturbed(c1), perturbed(c2)),
        terminals: (terminal.clone(), terminal.clone()),
    }
}

/// Checks `Y¹ = Y²` on `[t, T]` and that the averaged drivers agree there
/// along `(Y², Z²)`.
pub fn converse_consistency(
    sc: &ComparisonScenario,
    t: f64,
    sim: &ComparisonSim,
) -> Result<ConverseReport> {
    let (cloud, bundle) = sim.state()?;
    let grid = *bundle.grid();
    let tk = grid
        .index_of(t)
        .ok_or_else(|| Error::InvalidArgument(format!("t = {t} is not a grid node")))?;
    let (p1, p2, _, _) = solve_pair(sc, &cloud, &bundle, &sim.picard)?;
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for k in tk..=grid.n_steps() {
        for (a, b) in p1.y_slice(k).iter().zip(p2.y_slice(k)) {
            diff = diff.max((a - b).abs());
            scale = scale.max(b.abs());
        }
    }
    let mut residual: f64 = 0.0;
    for k in tk..grid.n_steps() {
        let s = grid.node(k);
        let g1 = sc.drivers.0.averaged_at(s, p1.law_slice(&cloud, k));
        let g2 = sc.drivers.1.averaged_at(s, p2.law_slice(&cloud, k));
        let r = chunked_mean(p2.n_paths(), |i| {
            let x = cloud.state(i, k);
            let (y, z) = (p2.y(i, k), p2.z(i, k));
            (g1.eval(x, y, z) - g2.eval(x, y, z)).abs()
        });
        residual = residual.max(r);
    }
    let se = bootstrap_threshold_se(
        &p1,
        &p2,
        &cloud,
        sim.picard.regression_degree,
        sim.bootstrap_resamples,
        sim.bootstrap_seed,
    )?;
    let tolerance = (3.0 * se).max(10.0 * sim.picard.tol * (1.0 + scale));
    Ok(ConverseReport {
        t,
        max_abs_difference: diff,
        tolerance,
        max_driver_residual: residual,
        pass: diff <= tolerance && residual <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ComparisonSim {
        ComparisonSim {
            n_paths: 2000,
            n_steps: 10,
            ..Default::default()
        }
    }

    #[test]
    fn identical_data_zero_violation() {
        let sc = random_compliant_scenario(3, 0);
        let same = ComparisonScenario {
            id: "same".into(),
            drivers: (sc.drivers.1.clone(), sc.drivers.1.clone()),
            terminals: (sc.terminals.1.clone(), sc.terminals.1.clone()),
        };
        let r = run_comparison_suite(&[same], &small()).unwrap();
        assert_eq!(r.entries[0].violation_measure, 0.0);
        assert!(r.all_pass);
    }

    #[test]
    fn min_terminal_below_zero() {
        let sc = ComparisonScenario {
            id: "min".into(),
            drivers: (Driver::zero(), Driver::zero()),
            terminals: (
                TerminalFunctional::of_terminal_state(|s| s[0].min(0.0)),
                TerminalFunctional::constant(0.0),
            ),
        };
        let sim = ComparisonSim {
            n_paths: 20_000,
            ..small()
        };
        let (cloud, bundle) = sim.state().unwrap();
        let (p1, p2, _, _) = solve_pair(&sc, &cloud, &bundle, &sim.picard).unwrap();
        let oracle = -(1.0 / (2.0 * PI)).sqrt();
        assert!((p1.mean_y(0) - oracle).abs() < 0.02, "{}", p1.mean_y(0));
        assert_eq!(p2.mean_y(0), 0.0);
        let r = run_comparison_suite(&[sc], &sim).unwrap();
        assert!(r.all_pass, "{:?}", r.entries);
    }

    #[test]
    fn non_compliant_rejected_before_solving() {
        let err = run_comparison_suite(&[zprime_scenario()], &small()).unwrap_err();
        assert!(matches!(err, Error::Hypothesis(_)));
        let err = run_comparison_suite(&[yprime_scenario(5)], &small()).unwrap_err();
        assert!(matches!(err, Error::Hypothesis(_)));
    }

    #[test]
    fn mislabelled_flag_caught_by_probe() {
        let mut sc = random_compliant_scenario(1, 0);
        sc.drivers.0 = Driver::separable(
            |_, _, _, _| 0.0,
            Some(Arc::new(|_, _, yp: f64, _| -yp)),
            1.0,
            flags(true, true),
        );
        let err = run_comparison_suite(&[sc], &small()).unwrap_err();
        assert!(matches!(err, Error::Hypothesis(_)));
    }

    #[test]
    fn battery_is_compliant_by_construction() {
        let sim = small();
        let (cloud, bundle) = sim.state().unwrap();
        for sc in random_battery(11, 12) {
            let xi1 = sc.terminals.0.evaluate(&cloud, &bundle).unwrap();
            let xi2 = sc.terminals.1.evaluate(&cloud, &bundle).unwrap();
            let h = check_hypotheses(&sc, (&xi1, &xi2), &sim).unwrap();
            assert!(h.compliant(), "{}: {h:?}", sc.id);
        }
    }

    #[test]
    fn oracle_constants() {
        assert!((example_3_1_y0() - 0.70212).abs() < 1e-5);
        assert!((example_3_2_negative_probability() - 0.5734).abs() < 1e-4);
    }

    #[test]
    fn converse_identical_data_exact() {
        let sc = random_compliant_scenario(5, 1);
        let conv = converse_scenario(&sc.drivers.1, &sc.terminals.1, 0.5, 0.0, 0.0);
        let r = converse_consistency(&conv, 0.5, &small()).unwrap();
        assert!(r.max_abs_difference <= 1e-12, "{r:?}");
        assert!(r.pass);
    }

    #[test]
    fn converse_differs_only_before_t() {
        let sc = random_compliant_scenario(5, 2);
        let conv = converse_scenario(&sc.drivers.1, &sc.terminals.1, 0.5, -0.2, 0.3);
        let r = converse_consistency(&conv, 0.5, &small()).unwrap();
        assert!(r.pass, "{r:?}");
    }
}
