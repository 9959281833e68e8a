use mf_fbsde_core::families::{markov_problem, Params};
use mf_fbsde_core::forward::{solve_conditional_flow, InitialCondition};
use mf_fbsde_core::markov::{
    build_background, build_value_surface, conditional_flow, solve_flow_bsde, space_nodes, value_function,
    MarkovSim,
};

fn small_sim(paths: usize, steps: usize) -> MarkovSim {
    MarkovSim {
        n_steps: steps,
        background_paths: paths,
        flow_paths: paths,
        bootstrap_resamples: 100,
        ..MarkovSim::default()
    }
}

#[test]
fn two_point_initial_law_reproduces_value_function() {
    let p = markov_problem("nonlinear_mf", &Params::new()).unwrap();
    let sim = small_sim(4000, 16);
    let bg = build_background(&p, &sim).unwrap();
    let k = 4;
    let (a, b) = (0.2, 0.9);
    let starts: Vec<f64> = (0..sim.flow_paths).map(|i| if i % 2 == 0 { a } else { b }).collect();
    let (cloud, bundle) =
        conditional_flow(&p, &bg, k, &InitialCondition::Samples(starts), sim.flow_paths, 11).unwrap();
    // Two distinct start states: a linear basis is exact at the first node.
    let mut picard = sim.picard;
    picard.regression_degree = 1;
    let pair = solve_flow_bsde(&p, &bg, k, &cloud, &bundle, &picard).unwrap();
    for (x, parity) in [(a, 0), (b, 1)] {
        let ys: Vec<f64> = (0..pair.n_paths()).filter(|i| i % 2 == parity).map(|i| pair.y(i, 0)).collect();
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let u = value_function(&p, &bg, k, &[x], &sim).unwrap();
        let tol = 4.0 * u.std_error * 2f64.sqrt() + 0.01;
        assert!((mean - u.u).abs() < tol, "x = {x}: {mean} vs {} (tol {tol})", u.u);
    }
}

#[test]
fn flow_from_the_start_point_is_the_mckean_cloud() {
    let p = markov_problem("linear_mf", &Params::new()).unwrap();
    let bg = build_background(&p, &small_sim(500, 8)).unwrap();
    let flow = solve_conditional_flow(
        &p.forward,
        &bg.law,
        0,
        &InitialCondition::Point(p.x0.clone()),
        &bg.bundle,
    )
    .unwrap();
    for k in 0..=8 {
        for (u, v) in flow.slice(k).iter().zip(bg.cloud.slice(k)) {
            assert!((u - v).abs() < 1e-10, "node {k}: {u} vs {v}");
        }
    }
}

#[test]
fn growth_constant_is_stable_under_refinement() {
    let p = markov_problem("nonlinear_mf", &Params::new()).unwrap();
    let xs = space_nodes(p.x0[0], 1.5, 7);
    let growth = |paths: usize, steps: usize| {
        let sim = small_sim(paths, steps);
        let bg = build_background(&p, &sim).unwrap();
        let s = build_value_surface(&p, &bg, &[0, steps / 2], &xs, &sim).unwrap();
        s.growth_constant()
    };
    let base = growth(1500, 8);
    for (paths, steps) in [(3000, 8), (1500, 16)] {
        let g = growth(paths, steps);
        assert!((g / base - 1.0).abs() <= 0.2, "growth {g} vs {base} at M = {paths}, {steps} steps");
    }
}
