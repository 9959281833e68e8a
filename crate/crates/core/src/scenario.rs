//! Scenario files: TOML with fixed sections, unknown keys rejected, every
//! default written back into the resolved config.
//!
//! ```toml
//! name = "heat"
//!
//! [problem]
//! family = "heat"
//! params = { horizon = 0.5 }
//!
//! [simulation]
//! paths = 100000
//! steps = 32
//!
//! [tasks]
//! run = ["value_surface", "pde_crosscheck"]
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bsde::PicardConfig;
use crate::error::{Error, Result};
use crate::families::{family, FamilyInfo, FamilyKind, Params};
use crate::markov::MarkovSim;
use crate::pde::{ChiParams, GrowthSpec, DEFAULT_TRUNCATIONS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Counterexample,
    Battery,
    Background,
    ValueSurface,
    PdeCrosscheck,
    Dpp,
    Regularity,
    ChiCertificate,
    Growth,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Counterexample => "counterexample",
            Task::Battery => "battery",
            Task::Background => "background",
            Task::ValueSurface => "value_surface",
            Task::PdeCrosscheck => "pde_crosscheck",
            Task::Dpp => "dpp",
            Task::Regularity => "regularity",
            Task::ChiCertificate => "chi_certificate",
            Task::Growth => "growth",
        }
    }

    fn requires(self) -> &'static [Task] {
        match self {
            Task::ValueSurface | Task::ChiCertificate | Task::Regularity => &[Task::Background],
            Task::PdeCrosscheck | Task::Dpp => &[Task::Background, Task::ValueSurface],
            _ => &[],
        }
    }

    fn allowed(self, kind: FamilyKind) -> bool {
        match self {
            Task::Counterexample => kind == FamilyKind::Counterexample,
            Task::Battery => kind == FamilyKind::Battery,
            Task::Growth => true,
            _ => kind == FamilyKind::Markov,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: Option<String>,
    problem: RawProblem,
    simulation: Option<RawSimulation>,
    tasks: Option<RawTasks>,
    surface: Option<RawSurface>,
    pde: Option<RawPde>,
    dpp: Option<RawDpp>,
    regularity: Option<RawRegularity>,
    certificate: Option<RawCertificate>,
    growth: Option<RawGrowth>,
    tolerances: Option<RawTolerances>,
    output: Option<RawOutput>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    family: String,
    params: Option<BTreeMap<String, f64>>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    paths: Option<usize>,
    flow_paths: Option<usize>,
    particles: Option<usize>,
    replicates: Option<usize>,
    steps: Option<usize>,
    dt: Option<f64>,
    seed: Option<u64>,
    regression_degree: Option<usize>,
    picard_tol: Option<f64>,
    picard_max_iter: Option<usize>,
    z_control_variate: Option<bool>,
    bootstrap_resamples: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTasks {
    run: Option<Vec<Task>>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSurface {
    half_width: Option<f64>,
    nodes: Option<usize>,
    time_stride: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPde {
    dx: Option<f64>,
    max_doublings: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDpp {
    probes: Option<usize>,
    seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegularity {
    nodes: Option<usize>,
    time_stride: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCertificate {
    a: Option<f64>,
    p: Option<f64>,
    k: Option<f64>,
    lattice_times: Option<usize>,
    x_min: Option<f64>,
    x_max: Option<f64>,
    lattice_x: Option<usize>,
    c1_override: Option<f64>,
    inflation: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrowth {
    a_tilde: Option<f64>,
    sigma: Option<f64>,
    horizon: Option<f64>,
    p: Option<f64>,
    probe_times: Option<Vec<f64>>,
    truncations: Option<Vec<f64>>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTolerances {
    y0_rel: Option<f64>,
    z_rel: Option<f64>,
    prob_abs: Option<f64>,
    path_abs: Option<f64>,
    contraction_slack: Option<f64>,
    closed_form_abs: Option<f64>,
    crosscheck: Option<f64>,
    dpp_fraction: Option<f64>,
    holder_floor: Option<f64>,
    growth_settle: Option<f64>,
    growth_blowup: Option<f64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    directory: Option<String>,
    formats: Option<Vec<Format>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProblemSection {
    pub family: String,
    pub params: Params,
}

#[derive(Clone, Debug, Serialize)]
pub struct SimulationSection {
    /// Background (or counterexample) paths `M`.
    pub paths: usize,
    /// Paths per value-function flow.
    pub flow_paths: usize,
    /// Particles `N` of the interacting system.
    pub particles: usize,
    /// Independent replicates for error estimates in studies.
    pub replicates: usize,
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
    pub regression_degree: usize,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub z_control_variate: bool,
    pub bootstrap_resamples: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SurfaceSection {
    pub half_width: f64,
    pub nodes: usize,
    pub time_stride: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct PdeSection {
    pub dx: f64,
    pub max_doublings: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct DppSection {
    pub probes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RegularitySection {
    pub nodes: usize,
    pub time_stride: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthSection {
    pub a_tilde: f64,
    pub sigma: f64,
    pub horizon: f64,
    pub p: f64,
    pub probe_times: Vec<f64>,
    pub truncations: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Tolerances {
    pub y0_rel: f64,
    pub z_rel: f64,
    pub prob_abs: f64,
    pub path_abs: f64,
    pub contraction_slack: f64,
    pub closed_form_abs: f64,
    pub crosscheck: f64,
    pub dpp_fraction: f64,
    pub holder_floor: f64,
    /// Bounded ladder: relative change of the last rung.
    pub growth_settle: f64,
    /// Unbounded ladder: minimal growth factor of the last rung.
    pub growth_blowup: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OutputSection {
    pub directory: String,
    pub formats: Vec<Format>,
}

/// Fully resolved scenario. Serializing it gives the hashed canonical form.
#[derive(Clone, Debug, Serialize)]
pub struct Scenario {
    pub name: String,
    pub problem: ProblemSection,
    pub simulation: SimulationSection,
    pub tasks: Vec<Task>,
    pub surface: SurfaceSection,
    pub pde: PdeSection,
    pub dpp: DppSection,
    pub regularity: RegularitySection,
    pub certificate: ChiParams,
    pub growth: GrowthSection,
    pub tolerances: Tolerances,
    pub output: OutputSection,
}

/// Byte offset to 1-based (line, column).
fn position(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

/// Position of `key` inside `[section]` (top level when `section` is empty),
/// also matching inline tables such as `params = { key = .. }`.
fn locate(src: &str, section: &str, key: &str) -> (usize, usize) {
    let mut current = String::new();
    for (i, line) in src.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            current = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        if current != section && !section.starts_with(&format!("{current}.")) && !(current.is_empty() && section.is_empty()) {
            continue;
        }
        let mut from = 0;
        while let Some(pos) = line[from..].find(key) {
            let at = from + pos;
            let prev_ok = at == 0 || !line.as_bytes()[at - 1].is_ascii_alphanumeric() && line.as_bytes()[at - 1] != b'_';
            let rest = line[at + key.len()..].trim_start();
            if prev_ok && rest.starts_with('=') {
                return (i + 1, at + 1);
            }
            from = at + key.len();
        }
    }
    (0, 0)
}

fn config_err(src: &str, section: &str, key: &str, message: String) -> Error {
    let (line, column) = locate(src, section, key);
    Error::Config {
        line,
        column,
        message,
    }
}

struct Checker<'a> {
    src: &'a str,
}

impl Checker<'_> {
    fn positive(&self, section: &str, key: &str, v: f64) -> Result<f64> {
        if v.is_finite() && v > 0.0 {
            Ok(v)
        } else {
            Err(config_err(self.src, section, key, format!("{section}.{key} must be positive, got {v}")))
        }
    }

    fn at_least(&self, section: &str, key: &str, v: usize, min: usize) -> Result<usize> {
        if v >= min {
            Ok(v)
        } else {
            Err(config_err(self.src, section, key, format!("{section}.{key} must be at least {min}, got {v}")))
        }
    }

    fn within(&self, section: &str, key: &str, v: f64, lo: f64, hi: f64) -> Result<f64> {
        if v.is_finite() && v >= lo && v <= hi {
            Ok(v)
        } else {
            Err(config_err(self.src, section, key, format!("{section}.{key} = {v} outside [{lo}, {hi}]")))
        }
    }
}

fn default_tasks(kind: FamilyKind) -> Vec<Task> {
    match kind {
        FamilyKind::Counterexample => vec![Task::Counterexample],
        FamilyKind::Battery => vec![Task::Battery],
        FamilyKind::Markov => vec![Task::Background, Task::ValueSurface],
    }
}

fn horizon_of(info: &FamilyInfo, params: &Params) -> f64 {
    match info.name {
        "example_3_1" => 1.0,
        "example_3_2" => 2.0,
        _ => params.get("horizon").copied().unwrap_or(1.0),
    }
}

/// Parse and resolve scenario text. `stem` names the scenario when the file
/// does not.
pub fn parse_scenario_str(src: &str, stem: &str) -> Result<Scenario> {
    let raw: RawScenario = toml::from_str(src).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| position(src, s.start));
        Error::Config {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    let ck = Checker { src };

    let info = family(&raw.problem.family)
        .map_err(|e| config_err(src, "problem", "family", e.to_string()))?;
    let given = raw.problem.params.unwrap_or_default();
    let params = info.resolve(&given).map_err(|e| {
        let key = given
            .keys()
            .find(|k| e.to_string().contains(&format!("'{k}'")))
            .cloned()
            .unwrap_or_else(|| "params".into());
        config_err(src, "problem.params", &key, e.to_string())
    })?;
    let horizon = horizon_of(&info, &params);

    let s = raw.simulation.unwrap_or_default();
    let default_steps = match info.name {
        "example_3_1" => 64,
        "example_3_2" => 128,
        "randomized_battery" => 16,
        _ => 32,
    };
    let steps = match (s.steps, s.dt) {
        (Some(n), None) => ck.at_least("simulation", "steps", n, 1)?,
        (None, Some(dt)) => {
            let dt = ck.positive("simulation", "dt", dt)?;
            let n = (horizon / dt).round();
            if n < 1.0 || (n * dt - horizon).abs() > 1e-9 * horizon {
                return Err(config_err(
                    src,
                    "simulation",
                    "dt",
                    format!("dt = {dt} does not divide the horizon {horizon}"),
                ));
            }
            n as usize
        }
        (Some(n), Some(dt)) => {
            if ((horizon / n as f64) - dt).abs() > 1e-12 {
                return Err(config_err(
                    src,
                    "simulation",
                    "dt",
                    format!("dt = {dt} disagrees with steps = {n} on the horizon {horizon}"),
                ));
            }
            n
        }
        (None, None) => default_steps,
    };
    if info.name == "example_3_2" && steps % 2 != 0 {
        return Err(config_err(src, "simulation", "steps", "example_3_2 needs an even step count".into()));
    }
    let default_paths = match info.kind {
        FamilyKind::Counterexample => 100_000,
        FamilyKind::Battery => 4_000,
        FamilyKind::Markov => 20_000,
    };
    let paths = ck.at_least("simulation", "paths", s.paths.unwrap_or(default_paths), 2)?;
    let simulation = SimulationSection {
        paths,
        flow_paths: ck.at_least("simulation", "flow_paths", s.flow_paths.unwrap_or(10_000), 2)?,
        particles: ck.at_least("simulation", "particles", s.particles.unwrap_or(256), 1)?,
        replicates: ck.at_least("simulation", "replicates", s.replicates.unwrap_or(200), 2)?,
        steps,
        dt: horizon / steps as f64,
        seed: s.seed.unwrap_or(0),
        regression_degree: ck.at_least("simulation", "regression_degree", s.regression_degree.unwrap_or(3), 1)?,
        picard_tol: ck.positive("simulation", "picard_tol", s.picard_tol.unwrap_or(1e-6))?,
        picard_max_iter: ck.at_least("simulation", "picard_max_iter", s.picard_max_iter.unwrap_or(50), 1)?,
        z_control_variate: s.z_control_variate.unwrap_or(true),
        bootstrap_resamples: ck.at_least("simulation", "bootstrap_resamples", s.bootstrap_resamples.unwrap_or(200), 2)?,
    };

    let mut tasks = raw
        .tasks
        .and_then(|t| t.run)
        .unwrap_or_else(|| default_tasks(info.kind));
    for t in tasks.clone() {
        if !t.allowed(info.kind) {
            return Err(config_err(
                src,
                "tasks",
                "run",
                format!("task '{}' does not apply to family '{}'", t.as_str(), info.name),
            ));
        }
        tasks.extend_from_slice(t.requires());
    }
    tasks.sort();
    tasks.dedup();

    let sf = raw.surface.unwrap_or_default();
    let surface = SurfaceSection {
        half_width: ck.positive("surface", "half_width", sf.half_width.unwrap_or(1.0))?,
        nodes: ck.at_least("surface", "nodes", sf.nodes.unwrap_or(41), 3)?,
        time_stride: ck.at_least("surface", "time_stride", sf.time_stride.unwrap_or(8), 1)?,
    };
    if tasks.contains(&Task::ValueSurface) && steps % surface.time_stride != 0 {
        return Err(config_err(src, "surface", "time_stride", format!("time_stride must divide steps = {steps}")));
    }
    let pd = raw.pde.unwrap_or_default();
    let pde = PdeSection {
        dx: ck.positive("pde", "dx", pd.dx.unwrap_or(0.05))?,
        max_doublings: pd.max_doublings.unwrap_or(4),
    };
    // The PDE grid must contain every footprint node.
    let ratio = 2.0 * surface.half_width / (surface.nodes - 1) as f64 / pde.dx;
    if tasks.contains(&Task::PdeCrosscheck) && (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
        return Err(config_err(
            src,
            "pde",
            "dx",
            format!("dx = {} must divide the surface spacing {}", pde.dx, ratio * pde.dx),
        ));
    }
    let dp = raw.dpp.unwrap_or_default();
    let dpp = DppSection {
        probes: ck.at_least("dpp", "probes", dp.probes.unwrap_or(100), 1)?,
        seed: dp.seed.unwrap_or(7),
    };
    let rg = raw.regularity.unwrap_or_default();
    let regularity = RegularitySection {
        nodes: ck.at_least("regularity", "nodes", rg.nodes.unwrap_or(9), 1)?,
        time_stride: ck.at_least("regularity", "time_stride", rg.time_stride.unwrap_or(1), 1)?,
    };
    if tasks.contains(&Task::Regularity)
        && (steps % regularity.time_stride != 0 || steps / regularity.time_stride < 7)
    {
        return Err(config_err(
            src,
            "regularity",
            "time_stride",
            format!("time_stride must divide steps = {steps} and leave at least 8 time nodes"),
        ));
    }

    let c = raw.certificate.unwrap_or_default();
    let d = ChiParams::default();
    let certificate = ChiParams {
        a: c.a.unwrap_or(d.a),
        p: c.p.unwrap_or(d.p),
        k: ck.within("certificate", "k", c.k.unwrap_or(d.k), 0.0, f64::MAX)?,
        lattice_times: ck.at_least("certificate", "lattice_times", c.lattice_times.unwrap_or(d.lattice_times), 2)?,
        x_min: c.x_min.unwrap_or(d.x_min),
        x_max: c.x_max.unwrap_or(d.x_max),
        lattice_x: ck.at_least("certificate", "lattice_x", c.lattice_x.unwrap_or(d.lattice_x), 2)?,
        c1_override: c.c1_override,
        inflation: ck.within("certificate", "inflation", c.inflation.unwrap_or(d.inflation), 1.0, 10.0)?,
    };
    if !(certificate.a > 1.0) {
        return Err(config_err(src, "certificate", "a", format!("certificate.a must exceed 1, got {}", certificate.a)));
    }
    if !(certificate.p > 1.0) {
        return Err(config_err(src, "certificate", "p", format!("certificate.p must exceed 1, got {}", certificate.p)));
    }
    if !(certificate.x_min < certificate.x_max) {
        return Err(config_err(src, "certificate", "x_max", "certificate.x_max must exceed x_min".into()));
    }

    let g = raw.growth.unwrap_or_default();
    let growth = GrowthSection {
        a_tilde: ck.positive("growth", "a_tilde", g.a_tilde.unwrap_or(2.0))?,
        sigma: ck.positive("growth", "sigma", g.sigma.unwrap_or(1.0))?,
        horizon: ck.positive("growth", "horizon", g.horizon.unwrap_or(1.0))?,
        p: ck.positive("growth", "p", g.p.unwrap_or(2.0))?,
        probe_times: g.probe_times.unwrap_or_else(|| vec![0.1, 0.2, 0.25, 0.3, 0.5]),
        truncations: g.truncations.unwrap_or_else(|| DEFAULT_TRUNCATIONS.to_vec()),
    };
    if growth.probe_times.iter().any(|t| !(*t > 0.0 && *t <= growth.horizon)) {
        return Err(config_err(src, "growth", "probe_times", "probe times must lie in (0, horizon]".into()));
    }
    if growth.truncations.len() < 2 || growth.truncations.windows(2).any(|w| !(w[1] > w[0]) || !(w[0] > 0.0)) {
        return Err(config_err(src, "growth", "truncations", "truncations must be positive, increasing, at least two".into()));
    }

    let t = raw.tolerances.unwrap_or_default();
    let tolerances = Tolerances {
        y0_rel: ck.positive("tolerances", "y0_rel", t.y0_rel.unwrap_or(0.02))?,
        z_rel: ck.positive("tolerances", "z_rel", t.z_rel.unwrap_or(0.03))?,
        prob_abs: ck.positive("tolerances", "prob_abs", t.prob_abs.unwrap_or(0.02))?,
        path_abs: ck.positive("tolerances", "path_abs", t.path_abs.unwrap_or(0.02))?,
        contraction_slack: ck.positive("tolerances", "contraction_slack", t.contraction_slack.unwrap_or(0.1))?,
        closed_form_abs: ck.positive("tolerances", "closed_form_abs", t.closed_form_abs.unwrap_or(0.02))?,
        crosscheck: ck.positive("tolerances", "crosscheck", t.crosscheck.unwrap_or(0.02))?,
        dpp_fraction: ck.within("tolerances", "dpp_fraction", t.dpp_fraction.unwrap_or(0.95), 0.0, 1.0)?,
        holder_floor: ck.within("tolerances", "holder_floor", t.holder_floor.unwrap_or(0.35), 0.0, 1.0)?,
        growth_settle: ck.positive("tolerances", "growth_settle", t.growth_settle.unwrap_or(1e-3))?,
        growth_blowup: ck.positive("tolerances", "growth_blowup", t.growth_blowup.unwrap_or(1.5))?,
    };

    let name = raw.name.unwrap_or_else(|| stem.to_string());
    if name.is_empty() || name.contains(['/', '\\']) {
        return Err(config_err(src, "", "name", format!("scenario name '{name}' is not a plain file name")));
    }
    let o = raw.output.unwrap_or_default();
    let output = OutputSection {
        directory: o.directory.unwrap_or_else(|| format!("out/{name}")),
        formats: o.formats.unwrap_or_else(|| vec![Format::Csv, Format::Json]),
    };

    Ok(Scenario {
        name,
        problem: ProblemSection {
            family: info.name.to_string(),
            params,
        },
        simulation,
        tasks,
        surface,
        pde,
        dpp,
        regularity,
        certificate,
        growth,
        tolerances,
        output,
    })
}

pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    let src = std::fs::read_to_string(path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario");
    parse_scenario_str(&src, stem)
}

impl Scenario {
    /// Canonical JSON of the resolved config.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn family(&self) -> FamilyInfo {
        family(&self.problem.family).expect("resolved family exists")
    }

    pub fn horizon(&self) -> f64 {
        horizon_of(&self.family(), &self.problem.params)
    }

    pub fn picard(&self) -> PicardConfig {
        PicardConfig {
            beta: None,
            tol: self.simulation.picard_tol,
            max_iter: self.simulation.picard_max_iter,
            regression_degree: self.simulation.regression_degree,
            z_control_variate: self.simulation.z_control_variate,
        }
    }

    pub fn markov_sim(&self) -> MarkovSim {
        MarkovSim {
            n_steps: self.simulation.steps,
            background_paths: self.simulation.paths,
            background_seed: self.simulation.seed,
            flow_paths: self.simulation.flow_paths,
            flow_seed: self.simulation.seed.wrapping_add(1),
            picard: self.picard(),
            bootstrap_resamples: self.simulation.bootstrap_resamples,
        }
    }

    pub fn growth_spec(&self) -> GrowthSpec {
        GrowthSpec {
            a_tilde: self.growth.a_tilde,
            sigma: self.growth.sigma,
            horizon: self.growth.horizon,
            p: self.growth.p,
        }
    }

    pub fn output_dir(&self, base: &Path) -> PathBuf {
        base.join(&self.output.directory)
    }

    pub fn wants(&self, f: Format) -> bool {
        self.output.formats.contains(&f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_resolves_every_default() {
        let s = parse_scenario_str("[problem]\nfamily = \"example_3_1\"\n", "ex31").unwrap();
        assert_eq!(s.name, "ex31");
        assert_eq!(s.simulation.seed, 0);
        assert_eq!(s.simulation.steps, 64);
        assert_eq!(s.simulation.paths, 100_000);
        assert_eq!(s.tasks, vec![Task::Counterexample]);
        let json = s.canonical_json();
        for key in ["\"seed\": 0", "\"y0_rel\": 0.02", "\"formats\"", "\"picard_tol\""] {
            assert!(json.contains(key), "{key} missing");
        }
    }

    #[test]
    fn unknown_key_is_named_with_position() {
        let src = "[problem]\nfamily = \"heat\"\n\n[simulation]\nsigma_jump = 1.0\n";
        match parse_scenario_str(src, "x") {
            Err(Error::Config { line, message, .. }) => {
                assert_eq!(line, 5);
                assert!(message.contains("sigma_jump"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_family_and_bad_param_point_at_their_lines() {
        match parse_scenario_str("name = \"a\"\n[problem]\nfamily = \"nope\"\n", "x") {
            Err(Error::Config { line: 3, column: 1, message }) => assert!(message.contains("nope")),
            other => panic!("{other:?}"),
        }
        let src = "[problem]\nfamily = \"heat\"\nparams = { horizon = -2.0 }\n";
        match parse_scenario_str(src, "x") {
            Err(Error::Config { line: 3, column, message }) => {
                assert_eq!(column, 12);
                assert!(message.contains("horizon"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_syntax_reports_a_line() {
        match parse_scenario_str("[problem\nfamily = 1\n", "x") {
            Err(Error::Config { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tasks_pull_in_dependencies_in_order() {
        let src = "[problem]\nfamily = \"heat\"\n[tasks]\nrun = [\"dpp\", \"pde_crosscheck\"]\n";
        let s = parse_scenario_str(src, "x").unwrap();
        assert_eq!(s.tasks, vec![Task::Background, Task::ValueSurface, Task::PdeCrosscheck, Task::Dpp]);
        let bad = "[problem]\nfamily = \"example_3_1\"\n[tasks]\nrun = [\"dpp\"]\n";
        assert!(matches!(parse_scenario_str(bad, "x"), Err(Error::Config { line: 4, .. })));
    }

    #[test]
    fn dt_and_steps_agree() {
        let s = parse_scenario_str("[problem]\nfamily = \"heat\"\n[simulation]\ndt = 0.0625\n", "x").unwrap();
        assert_eq!(s.simulation.steps, 8);
        assert!(parse_scenario_str("[problem]\nfamily = \"heat\"\n[simulation]\ndt = 0.3\n", "x").is_err());
    }

    #[test]
    fn hash_tracks_resolved_values() {
        let a = parse_scenario_str("[problem]\nfamily = \"heat\"\n", "x").unwrap();
        let b = parse_scenario_str("[problem]\nfamily = \"heat\"\n[simulation]\nseed = 0\n", "x").unwrap();
        let c = parse_scenario_str("[problem]\nfamily = \"heat\"\n[simulation]\nseed = 1\n", "x").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
