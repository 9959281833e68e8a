//! Registry of named coefficient families. Scenario files select a family by
//! name and override its numeric parameters; nothing is parsed from
//! expressions.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use serde::Serialize;

use crate::bsde::{Driver, DriverFlags};
use crate::error::{Error, Result};
use crate::forward::{ForwardCoefficients, LawCoupling};
use crate::markov::{MarkovProblem, TerminalCost};
use crate::stats::normal_cdf;

pub type Params = BTreeMap<String, f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    /// A mean-field BSDE counterexample.
    Counterexample,
    /// Randomized comparison battery.
    Battery,
    /// Decoupled Markovian system with a value function.
    Markov,
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamSpec {
    pub name: &'static str,
    pub default: f64,
    pub min: f64,
    pub max: f64,
    pub integer: bool,
}

const fn real(name: &'static str, default: f64, min: f64, max: f64) -> ParamSpec {
    ParamSpec {
        name,
        default,
        min,
        max,
        integer: false,
    }
}

const fn int(name: &'static str, default: f64, min: f64, max: f64) -> ParamSpec {
    ParamSpec {
        name,
        default,
        min,
        max,
        integer: true,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FamilyInfo {
    pub name: &'static str,
    pub kind: FamilyKind,
    pub summary: &'static str,
    pub params: Vec<ParamSpec>,
    pub closed_form: bool,
}

impl FamilyInfo {
    /// Apply defaults and range checks. Unknown names are rejected.
    pub fn resolve(&self, given: &Params) -> Result<Params> {
        for key in given.keys() {
            if !self.params.iter().any(|p| p.name == key) {
                return Err(Error::Scenario(format!(
                    "family '{}' has no parameter '{key}'",
                    self.name
                )));
            }
        }
        let mut out = Params::new();
        for p in &self.params {
            let v = given.get(p.name).copied().unwrap_or(p.default);
            if !v.is_finite() || v < p.min || v > p.max {
                return Err(Error::Scenario(format!(
                    "parameter '{}' = {v} outside [{}, {}]",
                    p.name, p.min, p.max
                )));
            }
            if p.integer && v.fract() != 0.0 {
                return Err(Error::Scenario(format!(
                    "parameter '{}' must be an integer, got {v}",
                    p.name
                )));
            }
            out.insert(p.name.to_string(), v);
        }
        Ok(out)
    }
}

pub fn registry() -> Vec<FamilyInfo> {
    use FamilyKind::*;
    vec![
        FamilyInfo {
            name: "example_3_1",
            kind: Counterexample,
            summary: "f = -z' on [0, 1], xi = -(B_1^+)^3 against xi = 0",
            params: vec![],
            closed_form: true,
        },
        FamilyInfo {
            name: "example_3_2",
            kind: Counterexample,
            summary: "f = -y' on [0, 2], xi = 0 against xi = B_1^2",
            params: vec![],
            closed_form: true,
        },
        FamilyInfo {
            name: "randomized_battery",
            kind: Battery,
            summary: "random driver/terminal pairs satisfying the comparison hypotheses",
            params: vec![int("seed", 0.0, 0.0, 4_294_967_295.0), int("count", 50.0, 1.0, 1000.0)],
            closed_form: false,
        },
        FamilyInfo {
            name: "example_7_1",
            kind: Markov,
            summary: "b = sigma^2 x / 2, sigma(x) = sigma x, f = y', Phi = x",
            params: vec![
                real("sigma", 0.2, 0.01, 2.0),
                real("horizon", 0.5, 0.05, 5.0),
                real("x0", 1.0, 0.01, 100.0),
            ],
            closed_form: true,
        },
        FamilyInfo {
            name: "linear_mf",
            kind: Markov,
            summary: "b = kappa (x' - x), constant sigma, f = y', Phi = x",
            params: vec![
                real("kappa", 0.5, 0.0, 10.0),
                real("sigma", 1.0, 0.0, 10.0),
                real("x0", 0.0, -100.0, 100.0),
                real("horizon", 1.0, 0.05, 5.0),
            ],
            closed_form: true,
        },
        FamilyInfo {
            name: "heat",
            kind: Markov,
            summary: "b = 0, sigma = 1, f = 0, Phi = x^2",
            params: vec![real("x0", 0.0, -100.0, 100.0), real("horizon", 0.5, 0.05, 5.0)],
            closed_form: true,
        },
        FamilyInfo {
            name: "abs_terminal",
            kind: Markov,
            summary: "b = 0, sigma = 1, f = 0, Phi = |x|",
            params: vec![real("x0", 0.0, -100.0, 100.0), real("horizon", 1.0, 0.05, 5.0)],
            closed_form: true,
        },
        FamilyInfo {
            name: "nonlinear_mf",
            kind: Markov,
            summary: "mean-reverting sde with state-dependent noise, driver nonlinear in (x, y, z, y')",
            params: vec![real("x0", 0.5, -10.0, 10.0), real("horizon", 1.0, 0.05, 5.0)],
            closed_form: false,
        },
        FamilyInfo {
            name: "ode_linear",
            kind: Markov,
            summary: "b = 0, sigma = 1, f = gamma y + gamma_mf y', Phi = 1",
            params: vec![
                real("gamma", 1.0, -5.0, 5.0),
                real("gamma_mf", 0.0, 0.0, 5.0),
                real("horizon", 1.0, 0.05, 5.0),
            ],
            closed_form: true,
        },
    ]
}

pub fn family(name: &str) -> Result<FamilyInfo> {
    registry()
        .into_iter()
        .find(|f| f.name == name)
        .ok_or_else(|| Error::Scenario(format!("unknown coefficient family '{name}'")))
}

fn get(params: &Params, key: &str) -> f64 {
    params[key]
}

fn flags() -> DriverFlags {
    DriverFlags {
        independent_of_zprime: true,
        nondecreasing_in_yprime: true,
    }
}

fn brownian_forward() -> ForwardCoefficients {
    ForwardCoefficients::scalar(|_, _, _| 0.0, |_, _, _| 1.0, LawCoupling::Free, 0.0, 1.0)
}

/// Build the Markovian problem of a `Markov` family from resolved parameters.
pub fn markov_problem(name: &str, params: &Params) -> Result<MarkovProblem> {
    let info = family(name)?;
    if info.kind != FamilyKind::Markov {
        return Err(Error::Scenario(format!("family '{name}' has no value function")));
    }
    let p = info.resolve(params)?;
    let horizon = get(&p, "horizon");
    match name {
        "example_7_1" => {
            let s = get(&p, "sigma");
            let c = s * s / 2.0 + s;
            let fwd = ForwardCoefficients::scalar(
                move |_, _, x| 0.5 * s * s * x,
                move |_, _, x| s * x,
                LawCoupling::Free,
                c,
                c,
            );
            let driver = Driver::separable(|_, _, _, _| 0.0, Some(Arc::new(|_, _, yp, _| yp)), 1.0, flags());
            MarkovProblem::new(fwd, driver, TerminalCost::local(|x| x[0]), vec![get(&p, "x0")], horizon)
        }
        "linear_mf" => {
            let (k, s) = (get(&p, "kappa"), get(&p, "sigma"));
            let fwd = ForwardCoefficients::scalar(
                move |_, xp, x| k * (xp - x),
                move |_, _, _| s,
                LawCoupling::Affine,
                2.0 * k,
                (2.0 * k).max(s),
            );
            let driver = Driver::separable(|_, _, _, _| 0.0, Some(Arc::new(|_, _, yp, _| yp)), 1.0, flags());
            MarkovProblem::new(fwd, driver, TerminalCost::local(|x| x[0]), vec![get(&p, "x0")], horizon)
        }
        "heat" => MarkovProblem::new(
            brownian_forward(),
            Driver::zero(),
            TerminalCost::local(|x| x[0] * x[0]),
            vec![get(&p, "x0")],
            horizon,
        ),
        "abs_terminal" => MarkovProblem::new(
            brownian_forward(),
            Driver::zero(),
            TerminalCost::local(|x| x[0].abs()),
            vec![get(&p, "x0")],
            horizon,
        ),
        "nonlinear_mf" => {
            let fwd = ForwardCoefficients::scalar(
                |_, xp, x| 0.5 * (xp - x),
                |_, _, x| 0.8 + 0.2 * x.sin(),
                LawCoupling::Affine,
                1.0,
                1.0,
            );
            let driver = Driver::separable(
                |_, x, y, z| 0.3 * y.sin() - 0.2 * z[0].abs() + 0.2 * x[0].cos(),
                Some(Arc::new(|_, _, yp, _| 0.5 * yp.tanh())),
                1.0,
                flags(),
            );
            let phi = TerminalCost::Separable {
                local: Arc::new(|x| x[0].cos()),
                law: Some(Arc::new(|xp| 0.3 * xp[0])),
            };
            MarkovProblem::new(fwd, driver, phi, vec![get(&p, "x0")], horizon)
        }
        "ode_linear" => {
            let (g, gm) = (get(&p, "gamma"), get(&p, "gamma_mf"));
            let driver = Driver::separable(
                move |_, _, y, _| g * y,
                Some(Arc::new(move |_, _, yp, _| gm * yp)),
                g.abs() + gm,
                flags(),
            );
            MarkovProblem::new(brownian_forward(), driver, TerminalCost::local(|_| 1.0), vec![0.0], horizon)
        }
        _ => unreachable!("registry and builder disagree on '{name}'"),
    }
}

/// Closed-form `u(t, x)` where one exists.
pub fn exact_value(name: &str, params: &Params) -> Result<Option<Box<dyn Fn(f64, f64) -> f64 + Send + Sync>>> {
    let p = family(name)?.resolve(params)?;
    let horizon = p.get("horizon").copied().unwrap_or(0.0);
    Ok(match name {
        "example_7_1" => {
            let s = get(&p, "sigma");
            Some(Box::new(move |t: f64, x: f64| {
                let r = horizon - t;
                x * (s * s * r / 2.0).exp() + (s * s * horizon / 2.0).exp() * (r.exp() - 1.0)
            }))
        }
        "linear_mf" => {
            // E[X_t] = x0 for the background, so E[Y_t] = x0 e^{T-t}.
            let x0 = get(&p, "x0");
            let k = get(&p, "kappa");
            Some(Box::new(move |t: f64, x: f64| {
                let r = horizon - t;
                let decay = (-k * r).exp();
                x * decay + x0 * (1.0 - decay) + x0 * (r.exp() - 1.0)
            }))
        }
        "heat" => Some(Box::new(move |t: f64, x: f64| x * x + (horizon - t))),
        "abs_terminal" => Some(Box::new(move |t: f64, x: f64| {
            let s = horizon - t;
            if s <= 0.0 {
                return x.abs();
            }
            let sd = s.sqrt();
            let a = x / sd;
            let pdf = (-0.5 * a * a).exp() / (2.0 * PI).sqrt();
            2.0 * sd * pdf + x * (2.0 * normal_cdf(a) - 1.0)
        })),
        "ode_linear" => {
            let rate = get(&p, "gamma") + get(&p, "gamma_mf");
            Some(Box::new(move |t: f64, _x: f64| (rate * (horizon - t)).exp()))
        }
        _ => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_markov_family_builds_with_defaults() {
        for f in registry().into_iter().filter(|f| f.kind == FamilyKind::Markov) {
            markov_problem(f.name, &Params::new()).unwrap();
            assert_eq!(exact_value(f.name, &Params::new()).unwrap().is_some(), f.closed_form, "{}", f.name);
        }
    }

    #[test]
    fn unknown_names_and_ranges_are_rejected() {
        assert!(family("sigma_jump").is_err());
        let info = family("heat").unwrap();
        let mut p = Params::new();
        p.insert("sigma_jump".into(), 1.0);
        assert!(info.resolve(&p).is_err());
        let mut p = Params::new();
        p.insert("horizon".into(), -1.0);
        assert!(info.resolve(&p).is_err());
        let mut p = Params::new();
        p.insert("count".into(), 2.5);
        assert!(family("randomized_battery").unwrap().resolve(&p).is_err());
    }

    #[test]
    fn closed_forms_meet_the_terminal_condition() {
        let cases = [("example_7_1", 1.3), ("heat", -0.4), ("abs_terminal", -0.7), ("ode_linear", 2.0)];
        for (name, x) in cases {
            let prob = markov_problem(name, &Params::new()).unwrap();
            let u = exact_value(name, &Params::new()).unwrap().unwrap();
            let phi = prob.phi.eval(&prob.x0, &[x]);
            assert!((u(prob.horizon, x) - phi).abs() < 1e-12, "{name}");
        }
    }

    #[test]
    fn abs_closed_form_matches_quadrature() {
        let u = exact_value("abs_terminal", &Params::new()).unwrap().unwrap();
        let (t, x) = (0.36, 0.3);
        let s: f64 = 1.0 - t;
        let n = 20_000;
        let h = 16.0 / n as f64;
        let mut q = 0.0;
        for i in 0..n {
            let b = -8.0 + (i as f64 + 0.5) * h;
            q += (x + s.sqrt() * b).abs() * (-0.5 * b * b).exp() / (2.0 * PI).sqrt() * h;
        }
        assert!((u(t, x) - q).abs() < 1e-8);
    }
}
