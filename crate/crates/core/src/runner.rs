//! Scenario execution: tasks in dependency order, artifacts on disk, a
//! report with one entry per acceptance check, and convergence studies.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::brownian::sample_brownian_range;
use crate::bsde::{contraction_report, solve_meanfield_bsde};
use crate::comparison::{
    counterexample_decreasing_yprime, counterexample_zprime, random_battery, run_comparison_suite,
    yprime_scenario, ComparisonSim, CounterexampleTolerances,
};
use crate::error::{Error, Result};
use crate::export::{
    num, write_certificate_csv, write_dpp_csv, write_growth_csv, write_json, write_surface_csv,
    write_table, CertificateSummary,
};
use crate::families::{exact_value, markov_problem, FamilyKind};
use crate::forward::{chaos_gap, solve_mckean, ParticleCloud};
use crate::grid::TimeGrid;
use crate::markov::{
    build_background, build_value_surface, dpp_probe_suite, regularity_probe, space_nodes,
    MarkovProblem, MeanFieldBackground, ValueSurface,
};
use crate::pde::{growth_critical_time, pde_grid_for, solve_nonlocal_pde_1d, viscosity_crosscheck, Verdict};
use crate::scenario::{Format, Scenario, Task};
use crate::stats::{loglog_slope, SlopeFit};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Everything a run produced. `report.json` holds all of it except the
/// timings, which go to `timings.json` so that every other byte is a function
/// of the scenario alone.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub scenario_hash: String,
    pub tool_version: String,
    pub family: String,
    pub seed: u64,
    pub tasks: Vec<String>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub checks: Vec<Check>,
    pub pass: bool,
    #[serde(skip)]
    pub timings: Vec<StageTiming>,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

impl RunReport {
    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Ctx<'a> {
    sc: &'a Scenario,
    dir: PathBuf,
    artifacts: Vec<String>,
    checks: Vec<Check>,
    timings: Vec<StageTiming>,
}

impl Ctx<'_> {
    fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        if self.sc.wants(Format::Csv) {
            write_table(&self.dir.join(name), header, rows)?;
            self.artifacts.push(name.to_string());
        }
        Ok(())
    }

    fn csv_with(&mut self, name: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        if self.sc.wants(Format::Csv) {
            write(&self.dir.join(name))?;
            self.artifacts.push(name.to_string());
        }
        Ok(())
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        if self.sc.wants(Format::Json) {
            write_json(&self.dir.join(name), value)?;
            self.artifacts.push(name.to_string());
        }
        Ok(())
    }

    fn check(&mut self, name: &str, pass: bool, value: f64, tolerance: f64, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.to_string(),
            pass,
            value,
            tolerance,
            detail: detail.into(),
        });
    }

    fn timed<T>(&mut self, stage: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self).map_err(|e| e.in_stage(stage));
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

#[derive(Default)]
struct MarkovState {
    problem: Option<MarkovProblem>,
    bg: Option<MeanFieldBackground>,
    surface: Option<ValueSurface>,
}

fn surface_times(sc: &Scenario, stride: usize) -> Vec<usize> {
    (0..=sc.simulation.steps).step_by(stride).collect()
}

fn footprint_xs(sc: &Scenario, problem: &MarkovProblem, nodes: usize) -> Vec<f64> {
    space_nodes(problem.x0[0], sc.surface.half_width, nodes)
}

fn closed_form_error(sc: &Scenario, s: &ValueSurface) -> Result<Option<f64>> {
    let exact = match exact_value(&sc.problem.family, &sc.problem.params)? {
        Some(f) => f,
        None => return Ok(None),
    };
    let mut worst = 0.0f64;
    for (ti, &t) in s.times.iter().enumerate() {
        for (xi, &x) in s.xs.iter().enumerate() {
            worst = worst.max((s.value(ti, xi) - exact(t, x)).abs());
        }
    }
    Ok(Some(worst))
}

fn counterexample_task(ctx: &mut Ctx<'_>) -> Result<()> {
    let sc = ctx.sc;
    let tol = CounterexampleTolerances {
        y_rel: sc.tolerances.y0_rel,
        z_rel: sc.tolerances.z_rel,
        prob_abs: sc.tolerances.prob_abs,
        path_abs: sc.tolerances.path_abs,
    };
    let sim = &sc.simulation;
    let curve_rows = |c: &[crate::comparison::CurvePoint]| -> Vec<Vec<String>> {
        c.iter().map(|p| vec![num(p.t), num(p.mean_y), num(p.reference)]).collect()
    };
    match sc.problem.family.as_str() {
        "example_3_1" => {
            let r = counterexample_zprime(sim.steps, sim.paths, sim.seed, &sc.picard(), &tol)?;
            ctx.json("counterexample.json", &r)?;
            ctx.csv("curve.csv", &["t", "mean_y", "reference"], &curve_rows(&r.curve))?;
            let z: Vec<Vec<String>> = r.mean_z.iter().map(|p| vec![num(p.t), num(p.mean_y), num(p.reference)]).collect();
            ctx.csv("mean_z.csv", &["t", "mean_z", "reference"], &z)?;
            ctx.check("y0", r.y0_within, r.y0_rel_error, tol.y_rel, format!("Y0 = {} against {}", r.y0_first, r.y0_reference));
            ctx.check("mean_z", r.z_within, r.worst_z_rel_error, tol.z_rel, "worst interior E[Z_t] relative error");
            ctx.check("comparison_violated", r.comparison_violated, r.violation_measure, 0.0, "first solution exceeds the second at t = 0");
        }
        "example_3_2" => {
            let r = counterexample_decreasing_yprime(sim.steps, sim.paths, sim.seed, &sc.picard(), &tol)?;
            ctx.json("counterexample.json", &r)?;
            ctx.csv("curve.csv", &["t", "mean_y", "reference"], &curve_rows(&r.curve))?;
            ctx.check("mean_y_curve", r.curve_within, r.worst_rel_error, tol.y_rel, "worst node relative error of E[Y_t]");
            ctx.check(
                "negative_probability",
                r.probability_within,
                (r.negative_probability - r.negative_probability_reference).abs(),
                tol.prob_abs,
                format!("P(Y_1 < 0) = {}", r.negative_probability),
            );
            ctx.check("path_closed_form", r.path_within, r.path_sup_error, tol.path_abs, "sup over paths on [1, 2]");
            ctx.check("comparison_violated", r.comparison_violated, r.violation_measure, 0.0, "ordered data, reversed solutions");
        }
        other => return Err(Error::Scenario(format!("no counterexample for family '{other}'"))),
    }
    Ok(())
}

fn battery_task(ctx: &mut Ctx<'_>) -> Result<()> {
    let sc = ctx.sc;
    let p = &sc.problem.params;
    let scenarios = random_battery(p["seed"] as u64, p["count"] as usize);
    let sim = ComparisonSim {
        horizon: 1.0,
        n_steps: sc.simulation.steps,
        n_paths: sc.simulation.paths,
        seed: sc.simulation.seed,
        picard: sc.picard(),
        bootstrap_resamples: sc.simulation.bootstrap_resamples,
        ..ComparisonSim::default()
    };
    let rep = run_comparison_suite(&scenarios, &sim)?;
    let slack = sc.tolerances.contraction_slack;
    let mut worst_ratio = 0.0f64;
    let mut rows = Vec::new();
    for e in &rep.entries {
        let r = [
            contraction_max(&e.contraction[0].ratios),
            contraction_max(&e.contraction[1].ratios),
        ];
        worst_ratio = worst_ratio.max(r[0]).max(r[1]);
        rows.push(vec![
            e.scenario_id.clone(),
            num(e.violation_measure),
            num(e.threshold),
            e.pass.to_string(),
            num(r[0]),
            num(r[1]),
        ]);
    }
    ctx.json("battery.json", &rep)?;
    ctx.csv(
        "battery.csv",
        &["scenario_id", "violation_measure", "threshold", "pass", "max_ratio_first", "max_ratio_second"],
        &rows,
    )?;
    ctx.check(
        "comparison_battery",
        rep.all_pass,
        rep.violations as f64,
        0.0,
        format!("{} scenarios", rep.entries.len()),
    );
    let bound = std::f64::consts::FRAC_1_SQRT_2 + slack;
    ctx.check("picard_contraction", worst_ratio <= bound, worst_ratio, bound, "largest successive beta-norm gap ratio");
    Ok(())
}

fn contraction_max(ratios: &[f64]) -> f64 {
    ratios.iter().copied().fold(0.0, f64::max)
}

fn background_task(ctx: &mut Ctx<'_>, st: &mut MarkovState) -> Result<()> {
    let sc = ctx.sc;
    let problem = markov_problem(&sc.problem.family, &sc.problem.params)?;
    let bg = build_background(&problem, &sc.markov_sim())?;
    let grid = *bg.grid();
    let mut rows = Vec::new();
    for k in 0..grid.n_nodes() {
        rows.push(vec![num(grid.node(k)), num(bg.law.mean_at(k)?[0]), num(bg.pair.mean_y(k))]);
    }
    ctx.csv("background.csv", &["t", "mean_x", "mean_y"], &rows)?;
    #[derive(Serialize)]
    struct Summary {
        paths: usize,
        steps: usize,
        picard_iterations: usize,
        contraction: crate::bsde::ContractionReport,
        mean_y0: f64,
    }
    ctx.json(
        "background.json",
        &Summary {
            paths: bg.cloud.n_paths(),
            steps: grid.n_steps(),
            picard_iterations: bg.pair.iterations(),
            contraction: contraction_report(&bg.pair.diagnostics, sc.tolerances.contraction_slack),
            mean_y0: bg.pair.mean_y(0),
        },
    )?;
    st.problem = Some(problem);
    st.bg = Some(bg);
    Ok(())
}

fn surface_task(ctx: &mut Ctx<'_>, st: &mut MarkovState) -> Result<()> {
    let sc = ctx.sc;
    let (problem, bg) = (st.problem.as_ref().unwrap(), st.bg.as_ref().unwrap());
    let xs = footprint_xs(sc, problem, sc.surface.nodes);
    let surface = build_value_surface(problem, bg, &surface_times(sc, sc.surface.time_stride), &xs, &sc.markov_sim())?;
    ctx.csv_with("surface.csv", |p| write_surface_csv(p, &surface))?;
    #[derive(Serialize)]
    struct Summary {
        growth_constant: f64,
        lipschitz_x: f64,
        max_std_error: f64,
        closed_form_max_error: Option<f64>,
    }
    let err = closed_form_error(sc, &surface)?;
    ctx.json(
        "surface.json",
        &Summary {
            growth_constant: surface.growth_constant(),
            lipschitz_x: surface.lipschitz_x(),
            max_std_error: surface.std_errors.iter().copied().fold(0.0, f64::max),
            closed_form_max_error: err,
        },
    )?;
    if let Some(e) = err {
        let tol = sc.tolerances.closed_form_abs;
        ctx.check("surface_closed_form", e <= tol, e, tol, "max |u - closed form| on the probabilistic surface");
    }
    st.surface = Some(surface);
    Ok(())
}

fn crosscheck_task(ctx: &mut Ctx<'_>, st: &MarkovState) -> Result<()> {
    let sc = ctx.sc;
    let (problem, bg, prob) = (st.problem.as_ref().unwrap(), st.bg.as_ref().unwrap(), st.surface.as_ref().unwrap());
    let tol = sc.tolerances.crosscheck;
    let (grid, influence) = pde_grid_for(problem, bg, prob, sc.pde.dx, tol, sc.pde.max_doublings)?;
    let sol = solve_nonlocal_pde_1d(problem, bg, &grid)?;
    let rep = viscosity_crosscheck(prob, &sol.surface, tol)?;
    let pde_on_times = sol.surface.restrict(&prob.times, &sol.surface.xs.clone())?;
    ctx.csv_with("pde_surface.csv", |p| write_surface_csv(p, &pde_on_times))?;
    let pde_err = closed_form_error(sc, &sol.surface.restrict(&prob.times, &prob.xs)?)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        report: &'a crate::pde::CrosscheckReport,
        diagnostics: &'a crate::pde::PdeDiagnostics,
        x_min: f64,
        x_max: f64,
        boundary_influence: f64,
        pde_closed_form_max_error: Option<f64>,
    }
    ctx.json(
        "crosscheck.json",
        &Summary {
            report: &rep,
            diagnostics: &sol.diagnostics,
            x_min: grid.xs[0],
            x_max: grid.xs[grid.xs.len() - 1],
            boundary_influence: influence,
            pde_closed_form_max_error: pde_err,
        },
    )?;
    ctx.check("pde_crosscheck", rep.pass, rep.max_interior, tol, "max interior |u_prob - u_pde|");
    Ok(())
}

fn dpp_task(ctx: &mut Ctx<'_>, st: &MarkovState) -> Result<()> {
    let sc = ctx.sc;
    let (problem, bg, surface) = (st.problem.as_ref().unwrap(), st.bg.as_ref().unwrap(), st.surface.as_ref().unwrap());
    let rep = dpp_probe_suite(problem, bg, surface, sc.dpp.probes, sc.dpp.seed, &sc.markov_sim())?;
    ctx.csv_with("dpp.csv", |p| write_dpp_csv(p, &rep.probes))?;
    ctx.json("dpp.json", &rep)?;
    let need = sc.tolerances.dpp_fraction;
    ctx.check(
        "dpp_identity",
        rep.pass_fraction >= need,
        rep.pass_fraction,
        need,
        format!("{} probes, residual <= 3 x error bound", rep.probes.len()),
    );
    Ok(())
}

fn regularity_task(ctx: &mut Ctx<'_>, st: &MarkovState) -> Result<()> {
    let sc = ctx.sc;
    let (problem, bg) = (st.problem.as_ref().unwrap(), st.bg.as_ref().unwrap());
    let xs = footprint_xs(sc, problem, sc.regularity.nodes);
    let surface = build_value_surface(problem, bg, &surface_times(sc, sc.regularity.time_stride), &xs, &sc.markov_sim())?;
    let rep = regularity_probe(&surface)?;
    ctx.csv_with("regularity_surface.csv", |p| write_surface_csv(p, &surface))?;
    ctx.json("regularity.json", &rep)?;
    let floor = sc.tolerances.holder_floor;
    let exponent = rep.holder_t.as_ref().map_or(f64::INFINITY, |f| f.slope);
    ctx.check(
        "holder_in_time",
        rep.flat || exponent >= floor,
        exponent,
        floor,
        if rep.flat { "flat in time" } else { "fitted exponent, one-sided bound" },
    );
    Ok(())
}

fn certificate_task(ctx: &mut Ctx<'_>, st: &MarkovState) -> Result<()> {
    let sc = ctx.sc;
    let (problem, bg) = (st.problem.as_ref().unwrap(), st.bg.as_ref().unwrap());
    let cert = crate::pde::chi_supersolution_check(problem, bg, &sc.certificate)?;
    ctx.json("certificate.json", &CertificateSummary::from(&cert))?;
    ctx.csv_with("certificate.csv", |p| write_certificate_csv(p, &cert))?;
    ctx.check("chi_certificate", cert.pass, cert.max_lhs, 0.0, "largest lattice value must be negative");
    Ok(())
}

fn growth_task(ctx: &mut Ctx<'_>) -> Result<()> {
    let sc = ctx.sc;
    let spec = sc.growth_spec();
    let rep = growth_critical_time(&spec, &sc.growth.probe_times, &sc.growth.truncations)?;
    ctx.csv_with("growth.csv", |p| write_growth_csv(p, &rep))?;
    ctx.json("growth.json", &rep)?;
    let exact = 1.0 / (2.0 * spec.a_tilde * spec.sigma * spec.sigma);
    ctx.check("t_star", rep.t_star == exact, rep.t_star, exact, "closed form 1/(2 A sigma^2)");
    let settle = sc.tolerances.growth_settle;
    let blowup = sc.tolerances.growth_blowup;
    for &t in &sc.growth.probe_times {
        let ladder = rep.ladder(t);
        let (a, b) = (ladder[ladder.len() - 2].integral_value, ladder[ladder.len() - 1].integral_value);
        if t < rep.t_star {
            let change = (b - a).abs() / b.abs();
            let ok = ladder.iter().all(|r| r.verdict == Verdict::Finite) && change <= settle;
            ctx.check(&format!("growth_bounded_t{t}"), ok, change, settle, "relative change of the last rung");
        } else {
            let factor = b / a;
            let ok = ladder.iter().all(|r| r.verdict == Verdict::Divergent) && factor >= blowup;
            ctx.check(&format!("growth_unbounded_t{t}"), ok, factor, blowup, "growth factor of the last rung");
        }
    }
    Ok(())
}

/// Execute every task of the scenario and write artifacts under
/// `base/<output.directory>`.
pub fn run(sc: &Scenario, base: &Path) -> Result<RunReport> {
    let dir = sc.output_dir(base);
    std::fs::create_dir_all(&dir)?;
    let mut ctx = Ctx {
        sc,
        dir: dir.clone(),
        artifacts: Vec::new(),
        checks: Vec::new(),
        timings: Vec::new(),
    };
    write_json(&dir.join("scenario.json"), sc)?;
    ctx.artifacts.push("scenario.json".into());
    let mut st = MarkovState::default();
    for &task in &sc.tasks {
        match task {
            Task::Counterexample => ctx.timed("counterexample", counterexample_task)?,
            Task::Battery => ctx.timed("battery", battery_task)?,
            Task::Background => ctx.timed("background", |c| background_task(c, &mut st))?,
            Task::ValueSurface => ctx.timed("value_surface", |c| surface_task(c, &mut st))?,
            Task::PdeCrosscheck => ctx.timed("pde_crosscheck", |c| crosscheck_task(c, &st))?,
            Task::Dpp => ctx.timed("dpp", |c| dpp_task(c, &st))?,
            Task::Regularity => ctx.timed("regularity", |c| regularity_task(c, &st))?,
            Task::ChiCertificate => ctx.timed("chi_certificate", |c| certificate_task(c, &st))?,
            Task::Growth => ctx.timed("growth", growth_task)?,
        }
    }
    write_json(&dir.join("timings.json"), &ctx.timings)?;
    ctx.artifacts.push("timings.json".into());
    ctx.artifacts.push("report.json".into());
    let report = RunReport {
        scenario: sc.name.clone(),
        scenario_hash: sc.hash(),
        tool_version: TOOL_VERSION.to_string(),
        family: sc.problem.family.clone(),
        seed: sc.simulation.seed,
        tasks: sc.tasks.iter().map(|t| t.as_str().to_string()).collect(),
        pass: ctx.checks.iter().all(|c| c.pass),
        artifacts: ctx.artifacts,
        checks: ctx.checks,
        timings: ctx.timings,
        output_dir: dir.clone(),
    };
    write_json(&dir.join("report.json"), &report)?;
    for a in &report.artifacts {
        if !dir.join(a).is_file() {
            return Err(Error::Scenario(format!("report lists missing artifact {a}")));
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LadderParam {
    N,
    M,
    Dt,
    Dx,
}

impl LadderParam {
    pub fn as_str(self) -> &'static str {
        match self {
            LadderParam::N => "N",
            LadderParam::M => "M",
            LadderParam::Dt => "dt",
            LadderParam::Dx => "dx",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LadderSpec {
    pub param: LadderParam,
    pub values: Vec<f64>,
}

fn parse_value(s: &str) -> Option<f64> {
    let s = s.trim();
    match s.split_once('/') {
        Some((a, b)) => Some(a.trim().parse::<f64>().ok()? / b.trim().parse::<f64>().ok()?),
        None => s.parse().ok(),
    }
}

/// `param=v1,v2,...`, e.g. `dt=1/8,1/16,1/32,1/64` or `N=8,16,32,64`.
pub fn parse_ladder(spec: &str) -> Result<LadderSpec> {
    let (name, list) = spec
        .split_once('=')
        .ok_or_else(|| Error::Scenario(format!("ladder '{spec}' is not of the form param=v1,v2,...")))?;
    let param = match name.trim() {
        "N" => LadderParam::N,
        "M" => LadderParam::M,
        "dt" => LadderParam::Dt,
        "dx" => LadderParam::Dx,
        other => return Err(Error::Scenario(format!("unknown ladder parameter '{other}' (N, M, dt, dx)"))),
    };
    let values = list
        .split(',')
        .map(|v| parse_value(v).filter(|x| x.is_finite() && *x > 0.0))
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(|| Error::Scenario(format!("ladder values in '{spec}' must be positive numbers")))?;
    if values.len() < 4 {
        return Err(Error::Scenario(format!("ladder needs at least 4 points, got {}", values.len())));
    }
    if matches!(param, LadderParam::N | LadderParam::M) && values.iter().any(|v| v.fract() != 0.0) {
        return Err(Error::Scenario("N and M ladders take integers".into()));
    }
    Ok(LadderSpec { param, values })
}

#[derive(Clone, Debug, Serialize)]
pub struct StudyRow {
    pub value: f64,
    pub estimate: f64,
    pub reference: f64,
    pub error: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StudyReport {
    pub scenario: String,
    pub scenario_hash: String,
    pub param: LadderParam,
    pub quantity: String,
    /// `closed_form` or `finest_level`.
    pub reference: String,
    pub rows: Vec<StudyRow>,
    pub slope: SlopeFit,
    pub expected_band: Option<(f64, f64)>,
    pub in_band: Option<bool>,
    /// `empirical` when no theorem fixes the rate.
    pub rate_label: String,
}

fn rms_rows(value: f64, estimates: &[f64], reference: f64) -> StudyRow {
    let n = estimates.len() as f64;
    let sq: Vec<f64> = estimates.iter().map(|e| (e - reference).powi(2)).collect();
    let mse = sq.iter().sum::<f64>() / n;
    let var = sq.iter().map(|v| (v - mse).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let rmse = mse.sqrt();
    StudyRow {
        value,
        estimate: estimates.iter().sum::<f64>() / n,
        reference,
        error: rmse,
        std_error: if rmse > 0.0 { (var / n).sqrt() / (2.0 * rmse) } else { 0.0 },
    }
}

/// Terminal moment `E[g(X_T)]` estimated on `m` paths of replicate `r`.
fn terminal_moment(sc: &Scenario, problem: Option<&MarkovProblem>, m: usize, r: usize, seed: u64) -> Result<f64> {
    // B_1 needs a single step.
    let steps = if problem.is_some() { sc.simulation.steps } else { 1 };
    let grid = TimeGrid::new(0.0, sc.horizon(), steps)?;
    let bundle = sample_brownian_range(grid, 1, r * m, m, seed)?;
    match problem {
        None => {
            let cloud = ParticleCloud::brownian(&bundle)?;
            let law = cloud.law_at(grid.n_steps());
            crate::law::empirical_expectation(&law, |x| -x[0].max(0.0).powi(3))
        }
        Some(p) => {
            let (cloud, _) = solve_mckean(&p.forward, &p.x0, &bundle)?;
            let law = cloud.law_at(grid.n_steps());
            crate::law::empirical_expectation(&law, |x| p.phi.eval(x, x))
        }
    }
}

/// Rerun the scenario along the ladder and fit a log-log slope of the error.
pub fn convergence_study(sc: &Scenario, ladder: &LadderSpec) -> Result<StudyReport> {
    let kind = sc.family().kind;
    let family = sc.problem.family.as_str();
    let seed = sc.simulation.seed;
    let reps = sc.simulation.replicates;
    let mut rows = Vec::new();
    let (quantity, reference_kind, band, label): (&str, &str, Option<(f64, f64)>, &str) = match ladder.param {
        LadderParam::Dt => {
            let horizon = sc.horizon();
            if family == "example_3_2" {
                let sc2 = yprime_scenario(0);
                let reference = (-2.0f64).exp();
                for &dt in &ladder.values {
                    let steps = (horizon / dt).round() as usize;
                    let grid = TimeGrid::new(0.0, horizon, steps)?;
                    let bundle = sample_brownian_range(grid, 1, 0, sc.simulation.paths, seed)?;
                    let cloud = ParticleCloud::brownian_stopped(&bundle, steps / 2)?;
                    let xi: Vec<f64> = (0..cloud.n_paths()).map(|i| bundle.value(i, steps / 2)[0].powi(2)).collect();
                    let pair = solve_meanfield_bsde(&sc2.drivers.1, &xi, &cloud, &bundle, &sc.picard())?;
                    let est = pair.mean_y(0) / crate::stats::mean(&xi);
                    rows.push(StudyRow { value: dt, estimate: est, reference, error: (est - reference).abs(), std_error: 0.0 });
                }
                ("E[Y_0] / E[xi]", "closed_form", Some((0.7, 1.3)), "weak Euler order")
            } else {
                if kind != FamilyKind::Markov {
                    return Err(Error::Scenario(format!("dt ladder is not defined for '{family}'")));
                }
                let exact = exact_value(family, &sc.problem.params)?
                    .ok_or_else(|| Error::Scenario(format!("dt ladder needs a closed form; '{family}' has none")))?;
                let problem = markov_problem(family, &sc.problem.params)?;
                let reference = exact(0.0, problem.x0[0]);
                for &dt in &ladder.values {
                    let steps = (horizon / dt).round() as usize;
                    if ((horizon / steps as f64) - dt).abs() > 1e-9 * dt {
                        return Err(Error::Scenario(format!("dt = {dt} does not divide the horizon {horizon}")));
                    }
                    let mut sim = sc.markov_sim();
                    sim.n_steps = steps;
                    let bg = build_background(&problem, &sim)?;
                    let est = bg.pair.mean_y(0);
                    rows.push(StudyRow { value: dt, estimate: est, reference, error: (est - reference).abs(), std_error: 0.0 });
                }
                ("E[Y_0]", "closed_form", Some((0.7, 1.3)), "weak Euler order")
            }
        }
        LadderParam::M => {
            let problem = match kind {
                FamilyKind::Markov => Some(markov_problem(family, &sc.problem.params)?),
                _ if family == "example_3_1" => None,
                _ => return Err(Error::Scenario(format!("M ladder is not defined for '{family}'"))),
            };
            let (reference, kind_label) = match &problem {
                None => (-2.0 / (2.0 * PI).sqrt(), "closed_form"),
                Some(_) => {
                    let big = 16 * ladder.values.iter().copied().fold(0.0, f64::max) as usize;
                    (terminal_moment(sc, problem.as_ref(), big, 0, seed ^ 0x5eed)?, "finest_level")
                }
            };
            for &m in &ladder.values {
                let est: Vec<f64> = (0..reps)
                    .map(|r| terminal_moment(sc, problem.as_ref(), m as usize, r, seed))
                    .collect::<Result<_>>()?;
                rows.push(rms_rows(m, &est, reference));
            }
            (
                if problem.is_none() { "E[-(B_1^+)^3]" } else { "E[Phi(X_T, X_T)]" },
                kind_label,
                Some((-0.65, -0.35)),
                "central limit rate",
            )
        }
        LadderParam::N => {
            if kind != FamilyKind::Markov {
                return Err(Error::Scenario(format!("N ladder is not defined for '{family}'")));
            }
            let problem = markov_problem(family, &sc.problem.params)?;
            let grid = TimeGrid::new(0.0, sc.horizon(), sc.simulation.steps)?;
            let bundle = sample_brownian_range(grid, problem.forward.d, 0, sc.simulation.paths, seed)?;
            let (_, law) = solve_mckean(&problem.forward, &problem.x0, &bundle)?;
            for &n in &ladder.values {
                let g = chaos_gap(&problem.forward, &law, &problem.x0, n as usize, reps, seed.wrapping_add(1))?;
                rows.push(StudyRow { value: n, estimate: g.l2_gap, reference: 0.0, error: g.l2_gap, std_error: g.std_error });
            }
            ("L2 gap of the tagged particle at T", "mean_field_limit", Some((-0.65, -0.35)), "empirical")
        }
        LadderParam::Dx => {
            if kind != FamilyKind::Markov {
                return Err(Error::Scenario(format!("dx ladder is not defined for '{family}'")));
            }
            let exact = exact_value(family, &sc.problem.params)?
                .ok_or_else(|| Error::Scenario(format!("dx ladder needs a closed form; '{family}' has none")))?;
            let problem = markov_problem(family, &sc.problem.params)?;
            let bg = build_background(&problem, &sc.markov_sim())?;
            let x0 = problem.x0[0];
            let half = 4.0 * sc.surface.half_width;
            for &dx in &ladder.values {
                let n = (2.0 * half / dx).round() as usize + 1;
                let grid = crate::pde::PdeGrid1D::new(&problem, &bg, x0 - half, x0 + half, n)?;
                let sol = solve_nonlocal_pde_1d(&problem, &bg, &grid)?;
                let s = &sol.surface;
                let mut worst = 0.0f64;
                for (xi, &x) in s.xs.iter().enumerate() {
                    if (x - x0).abs() <= sc.surface.half_width + 1e-12 {
                        worst = worst.max((s.value(0, xi) - exact(s.times[0], x)).abs());
                    }
                }
                rows.push(StudyRow { value: dx, estimate: worst, reference: 0.0, error: worst, std_error: 0.0 });
            }
            ("max |u_pde(0, x) - u(0, x)| on the footprint", "closed_form", None, "scheme order")
        }
    };
    let xs: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let es: Vec<f64> = rows.iter().map(|r| r.error).collect();
    let slope = loglog_slope(&xs, &es)?;
    let in_band = band.map(|(lo, hi)| slope.slope >= lo && slope.slope <= hi);
    Ok(StudyReport {
        scenario: sc.name.clone(),
        scenario_hash: sc.hash(),
        param: ladder.param,
        quantity: quantity.to_string(),
        reference: reference_kind.to_string(),
        rows,
        slope,
        expected_band: band,
        in_band,
        rate_label: label.to_string(),
    })
}

/// Write `study_<param>.csv` and `.json` into the scenario's output directory.
pub fn write_study(sc: &Scenario, base: &Path, rep: &StudyReport) -> Result<Vec<PathBuf>> {
    let dir = sc.output_dir(base);
    let stem = format!("study_{}", rep.param.as_str());
    let mut out = Vec::new();
    if sc.wants(Format::Csv) {
        let rows: Vec<Vec<String>> = rep
            .rows
            .iter()
            .map(|r| vec![num(r.value), num(r.estimate), num(r.reference), num(r.error), num(r.std_error)])
            .collect();
        let p = dir.join(format!("{stem}.csv"));
        write_table(&p, &[rep.param.as_str(), "estimate", "reference", "error", "std_error"], &rows)?;
        out.push(p);
    }
    if sc.wants(Format::Json) {
        let p = dir.join(format!("{stem}.json"));
        write_json(&p, rep)?;
        out.push(p);
    }
    Ok(out)
}
