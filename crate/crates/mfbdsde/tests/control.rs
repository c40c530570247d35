use std::sync::Arc;

use mfbdsde::adjoint::solve_adjoint;
use mfbdsde::bdsde::{Dims, SolveConfig};
use mfbdsde::control::{
    control_gradient, convexity_probe, evaluate_cost, finite_difference, gateaux_derivative, optimize, project,
    smp_residual, smp_residual_from_gradient, solve_variational, solve_variational_on_tree, OptimizerConfig,
    SufficiencyConfig, Termination,
};
use mfbdsde::drivers::{build_grid, sample_paths, tree_paths, DriverMode, DriverPaths, DEFAULT_TREE_CAP};
use mfbdsde::instances::{nonlinear_problem, shipped_lq, zero_dynamics};
use mfbdsde::law::{LinearMeanField, LocalFn, QuadraticMeanField};
use mfbdsde::problem::{solve_mf_bdsde, solve_on_tree, BoxSet, Control, LqCoefficients, ProblemSpec, Terminal};
use proptest::prelude::*;

fn gaussian(n_particles: usize, n_steps: usize, seed: u64) -> DriverPaths {
    let grid = build_grid(1.0, n_steps).unwrap();
    sample_paths(&grid, n_particles, 1, 1, seed, DriverMode::Gaussian, DEFAULT_TREE_CAP).unwrap()
}

fn tree(n_steps: usize) -> DriverPaths {
    tree_paths(&build_grid(1.0, n_steps).unwrap(), 1, 1, DEFAULT_TREE_CAP).unwrap()
}

/// Control `a W_{t_{i+1}} + b i`, measurable at the end of its step.
fn adapted(paths: &DriverPaths, a: f64, b: f64) -> Control {
    let values = (0..paths.n_steps())
        .map(|i| (0..paths.n_particles).map(|p| a * paths.w_value(p, i + 1)[0] + b * i as f64).collect())
        .collect();
    Control { k: 1, values }
}

/// Tracking cost `½ (u - c)²` on zero dynamics, with admissible set `set`.
fn tracking(c: f64, set: BoxSet) -> ProblemSpec {
    ProblemSpec {
        dims: Dims { n: 1, l: 1, d: 1 },
        k: 1,
        f: Arc::new(LinearMeanField::zero(3, 1)),
        g: Arc::new(LinearMeanField::zero(3, 1)),
        h: Arc::new(LocalFn {
            in_dim: 3,
            out_dim: 1,
            value: Box::new(move |_, x, _, o| o[0] = 0.5 * (x[2] - c) * (x[2] - c)),
            jac_x: Box::new(move |_, x, _, o| o.copy_from_slice(&[0.0, 0.0, x[2] - c])),
        }),
        phi: Arc::new(QuadraticMeanField::diagonal(&[0.0], &[0.0])),
        terminal: Terminal::Constant(vec![0.0]),
        admissible: set,
    }
}

#[test]
fn cost_examples() {
    let paths = gaussian(50, 10, 1);
    let cfg = SolveConfig::default();

    let spec = zero_dynamics([0.0, 0.0, 1.0], 0.0, 0.0, Terminal::Constant(vec![0.0]));
    let u = Control::constant(10, 50, &[1.0]);
    let state = solve_mf_bdsde(&spec, &u, &paths, &cfg).unwrap();
    let j = evaluate_cost(&spec, &state, &u, &paths);
    assert!((j.mean - 0.5).abs() <= 1e-12 && j.std_error <= 1e-12);

    // h = y² (h1 = 2), Φ = y² (phi = 2), y ≡ 1.
    let spec = zero_dynamics([2.0, 0.0, 0.0], 2.0, 0.0, Terminal::Constant(vec![1.0]));
    let u = Control::constant(10, 50, &[0.0]);
    let state = solve_mf_bdsde(&spec, &u, &paths, &cfg).unwrap();
    let j = evaluate_cost(&spec, &state, &u, &paths).mean;
    assert!((j - 2.0).abs() <= 1e-12, "{j}");

    // Only the law term ½ Φ̄ E[y_0]² with Φ̄ = 2 and E[y_0] = 3.
    let spec = zero_dynamics([0.0, 0.0, 0.0], 0.0, 2.0, Terminal::Constant(vec![3.0]));
    let state = solve_mf_bdsde(&spec, &u, &paths, &cfg).unwrap();
    assert!((evaluate_cost(&spec, &state, &u, &paths).mean - 9.0).abs() <= 1e-12);
}

#[test]
fn variational_examples() {
    let paths = gaussian(40, 8, 2);
    let cfg = SolveConfig::default();
    let spec = shipped_lq();
    let u = adapted(&paths, 0.3, -0.1);
    let state = solve_mf_bdsde(&spec, &u, &paths, &cfg).unwrap();
    let zero = Control::constant(8, 40, &[0.0]);
    let var = solve_variational(&spec, &state, &u, &zero, &paths, &cfg).unwrap();
    assert!(var.y.iter().chain(&var.z).flatten().all(|x| x.abs() <= 1e-14));

    // f = u and v ≡ 1 give K_t = T - t and L ≡ 0.
    let c = LqCoefficients { f: [0.0, 0.0, 1.0], h: [0.0, 0.0, 1.0], ..Default::default() };
    let spec = ProblemSpec::lq(&c, Terminal::Constant(vec![0.0]), BoxSet::whole_space(1));
    let one = Control::constant(8, 40, &[1.0]);
    let state = solve_mf_bdsde(&spec, &zero, &paths, &cfg).unwrap();
    let var = solve_variational(&spec, &state, &zero, &one, &paths, &cfg).unwrap();
    for i in 0..=8 {
        let expect = 1.0 - paths.grid.t(i);
        assert!(var.y[i].iter().all(|k| (k - expect).abs() <= 1e-12), "step {i}");
        assert!(var.z[i].iter().all(|l| l.abs() <= 1e-12));
    }
}

#[test]
fn lq_variational_on_tree_is_the_exact_state_difference() {
    // The LQ state map is affine, so y(u + v) - y(u) solves the variational equation exactly.
    let paths = tree(3);
    let spec = shipped_lq();
    let u = adapted(&paths, 0.4, 0.1);
    let v = adapted(&paths, -0.7, 0.3);
    let state = solve_on_tree(&spec, &u, &paths).unwrap();
    let moved = solve_on_tree(&spec, &u.axpy(1.0, &v), &paths).unwrap();
    let var = solve_variational_on_tree(&spec, &state, &u, &v, &paths).unwrap();
    for i in 0..=3 {
        for p in 0..paths.n_particles {
            assert!((moved.y[i][p] - state.y[i][p] - var.y[i][p]).abs() <= 1e-12);
            assert!((moved.z[i][p] - state.z[i][p] - var.z[i][p]).abs() <= 1e-12);
        }
    }
}

#[test]
fn gateaux_example_with_control_only_in_the_cost() {
    let paths = gaussian(30, 10, 3);
    let cfg = SolveConfig::default();
    let spec = zero_dynamics([0.0, 0.0, 1.0], 0.0, 0.0, Terminal::Constant(vec![0.0]));
    let u = Control::constant(10, 30, &[1.0]);
    let state = solve_mf_bdsde(&spec, &u, &paths, &cfg).unwrap();
    let adj = solve_adjoint(&spec, &state, &u, &paths, &cfg).unwrap();
    let d = gateaux_derivative(&spec, &state, &adj, &u, &u, &paths, &cfg).unwrap();
    assert!((d.route1.mean - 1.0).abs() <= 1e-12);
    assert!((d.route2.mean - 1.0).abs() <= 1e-12);
}

#[test]
fn gradient_routes_agree_on_the_shipped_lq() {
    let paths = gaussian(2000, 10, 11);
    let cfg = SolveConfig::default();
    let spec = shipped_lq();
    let u = adapted(&paths, 0.3, -0.05);
    let v = adapted(&paths, -0.5, 0.1);
    let state = solve_mf_bdsde(&spec, &u, &paths, &cfg).unwrap();
    let adj = solve_adjoint(&spec, &state, &u, &paths, &cfg).unwrap();
    let d = gateaux_derivative(&spec, &state, &adj, &u, &v, &paths, &cfg).unwrap();
    assert!(d.gap.mean.abs() <= 3.0 * d.gap.std_error.max(1e-12), "{d:?}");
    let fd = finite_difference(&spec, &u, &v, 1e-4, &paths, &cfg).unwrap();
    assert!((d.route2.mean - fd).abs() <= 1e-3 * fd.abs(), "route2 {} fd {fd}", d.route2.mean);
}

#[test]
fn gradient_routes_agree_on_the_nonlinear_problem() {
    let paths = gaussian(1000, 10, 12);
    let cfg = SolveConfig::default();
    let spec = nonlinear_problem();
    let u = adapted(&paths, 0.2, 0.05);
    let v = adapted(&paths, 0.5, -0.1);
    let state = solve_mf_bdsde(&spec, &u, &paths, &cfg).unwrap();
    let adj = solve_adjoint(&spec, &state, &u, &paths, &cfg).unwrap();
    let d = gateaux_derivative(&spec, &state, &adj, &u, &v, &paths, &cfg).unwrap();
    assert!(d.gap.mean.abs() <= 3.0 * d.gap.std_error.max(1e-12), "{d:?}");
    let fd = finite_difference(&spec, &u, &v, 1e-4, &paths, &cfg).unwrap();
    assert!((d.route2.mean - fd).abs() <= 1e-3 * fd.abs(), "route2 {} fd {fd}", d.route2.mean);
}

#[test]
fn smp_residual_examples() {
    let set = BoxSet { lower: vec![0.0], upper: vec![f64::INFINITY] };
    let u = Control { k: 1, values: vec![vec![0.5, 0.0]] };
    let r = smp_residual_from_gradient(&[vec![0.3, 0.8]], &u, &set);
    assert!((r.per_step[0][0] - 0.3).abs() <= 1e-15);
    assert_eq!(r.per_step[0][1], 0.0);
    assert!((r.sup - 0.3).abs() <= 1e-15);
}

#[test]
fn smp_residual_vanishes_at_the_stationarity_relation() {
    // Without E[u] terms, ∂_u H = f3 p + g3 q + h3 u, so u' = -(f3 p + g3 q) / h3
    // zeroes the gradient for the same adjoint pair.
    let paths = gaussian(200, 8, 5);
    let cfg = SolveConfig::default();
    let spec = shipped_lq();
    let c = mfbdsde::instances::lq_coefficients();
    let u = adapted(&paths, 0.3, 0.0);
    let state = solve_mf_bdsde(&spec, &u, &paths, &cfg).unwrap();
    let adj = solve_adjoint(&spec, &state, &u, &paths, &cfg).unwrap();
    let values = (0..8)
        .map(|i| (0..200).map(|p| -(c.f[2] * adj.p_ahead[i][p] + c.g[2] * adj.q[i][p]) / c.h[2]).collect())
        .collect();
    let stationary = Control { k: 1, values };
    let r = smp_residual(&spec, &state, &adj, &stationary, &paths).unwrap();
    assert!(r.sup <= 1e-12, "{}", r.sup);
}

#[test]
fn optimizer_finds_the_tracking_target() {
    let paths = gaussian(20, 5, 6);
    let cfg = SolveConfig::default();
    let spec = tracking(0.7, BoxSet::whole_space(1));
    let u0 = Control::constant(5, 20, &[0.0]);
    let (u, report) = optimize(&spec, &u0, &paths, &cfg, &OptimizerConfig::default()).unwrap();
    assert_eq!(report.termination, Termination::Converged);
    assert!(u.values.iter().flatten().all(|x| (x - 0.7).abs() <= 1e-3));
    assert!(report.costs.windows(2).all(|w| w[1] <= w[0]));

    let set = BoxSet { lower: vec![1.7], upper: vec![f64::INFINITY] };
    let spec = tracking(0.7, set);
    let u0 = Control::constant(5, 20, &[3.0]);
    let (u, report) = optimize(&spec, &u0, &paths, &cfg, &OptimizerConfig::default()).unwrap();
    assert_eq!(report.termination, Termination::Converged);
    assert!(u.values.iter().flatten().all(|x| (x - 1.7).abs() <= 1e-12));
}

#[test]
fn optimizer_costs_never_increase_on_the_shipped_lq() {
    let paths = gaussian(500, 8, 7);
    let cfg = SolveConfig::default();
    let spec = shipped_lq();
    let u0 = Control::constant(8, 500, &[0.0]);
    let opt = OptimizerConfig { max_iters: 40, ..Default::default() };
    let (_, report) = optimize(&spec, &u0, &paths, &cfg, &opt).unwrap();
    assert!(report.costs.windows(2).all(|w| w[1] <= w[0]), "{:?}", report.costs);
    assert!(report.costs.last().unwrap() < &report.costs[0]);
}

#[test]
fn convexity_probe_separates_convex_and_concave_costs() {
    let cfg = SufficiencyConfig::default();
    let (ok, violations, _) = convexity_probe(&shipped_lq(), &cfg).unwrap();
    assert!(ok && violations == 0);

    let concave = LqCoefficients { h: [0.0, 0.0, -2.0], ..Default::default() };
    let spec = ProblemSpec::lq(&concave, Terminal::Constant(vec![0.0]), BoxSet::whole_space(1));
    let (ok, violations, worst) = convexity_probe(&spec, &cfg).unwrap();
    assert!(!ok && violations > 0 && worst < 0.0);
}

#[test]
fn variational_quotient_converges_on_the_nonlinear_problem() {
    // Mean square of (y^ε - y)/ε - K shrinks like ε² when the state map is curved.
    let paths = gaussian(400, 10, 8);
    let cfg = SolveConfig::default();
    let spec = nonlinear_problem();
    let u = adapted(&paths, 0.2, 0.05);
    let v = adapted(&paths, 0.5, -0.1);
    let state = solve_mf_bdsde(&spec, &u, &paths, &cfg).unwrap();
    let var = solve_variational(&spec, &state, &u, &v, &paths, &cfg).unwrap();
    let errors: Vec<f64> = [0.1, 0.05, 0.025]
        .iter()
        .map(|&eps| {
            let moved = solve_mf_bdsde(&spec, &u.axpy(eps, &v), &paths, &cfg).unwrap();
            let mut acc = 0.0;
            for i in 0..=10 {
                for p in 0..400 {
                    let d = (moved.y[i][p] - state.y[i][p]) / eps - var.y[i][p];
                    acc += d * d;
                }
            }
            acc / (11.0 * 400.0)
        })
        .collect();
    assert!(errors.windows(2).all(|w| w[1] < w[0]), "{errors:?}");
    assert!(errors[2] <= errors[0] / 8.0, "{errors:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent(vals in prop::collection::vec(-5.0f64..5.0, 1..20), lo in -2.0f64..0.0, width in 0.0f64..3.0) {
        let set = BoxSet { lower: vec![lo], upper: vec![lo + width] };
        let u = Control { k: 1, values: vec![vals] };
        let once = project(&u, &set);
        prop_assert!(once.is_admissible(&set));
        prop_assert_eq!(project(&once, &set), once);
    }
}

#[test]
fn gradient_shape_matches_the_control() {
    let paths = gaussian(10, 4, 9);
    let cfg = SolveConfig::default();
    let spec = shipped_lq();
    let u = Control::constant(4, 10, &[0.2]);
    let state = solve_mf_bdsde(&spec, &u, &paths, &cfg).unwrap();
    let adj = solve_adjoint(&spec, &state, &u, &paths, &cfg).unwrap();
    let g = control_gradient(&spec, &state, &adj, &u, &paths).unwrap();
    assert_eq!(g.len(), 4);
    assert!(g.iter().all(|r| r.len() == 10));
}
