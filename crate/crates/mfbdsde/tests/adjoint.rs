use std::sync::Arc;

use mfbdsde::adjoint::{
    adjoint_initial, adjoint_residual, hamiltonian, hamiltonian_gradients, reverse_time_transform, solve_adjoint,
    solve_adjoint_on_tree, AdjointSolution,
};
use mfbdsde::bdsde::{Dims, SolveConfig};
use mfbdsde::drivers::{build_grid, sample_paths, tree_paths, DriverMode, DriverPaths, DEFAULT_TREE_CAP};
use mfbdsde::law::{FirstOrderInteraction, LinearMeanField, LocalFn, MeanFieldFn, QuadraticMeanField, ScalarInteraction};
use mfbdsde::regression::Projector;
use mfbdsde::problem::{solve_on_tree, BoxSet, Control, LqCoefficients, ProblemSpec, Terminal};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn lq(c: LqCoefficients) -> ProblemSpec {
    ProblemSpec::lq(&c, Terminal::AffineW { offset: vec![0.2], slope: vec![1.0] }, BoxSet::whole_space(1))
}

fn sample_lq() -> LqCoefficients {
    LqCoefficients {
        f: [0.4, 0.2, 1.0],
        fbar: [0.1, 0.05, 0.3],
        g: [0.3, 0.2, 0.5],
        gbar: [0.1, 0.1, 0.2],
        h: [1.0, 0.5, 2.0],
        hbar: [0.3, 0.2, 0.4],
        phi: 1.0,
        phibar: 0.5,
    }
}

#[test]
fn hamiltonian_examples() {
    let only_h3 = LqCoefficients { h: [0.0, 0.0, 2.0], ..Default::default() };
    let e = hamiltonian(&lq(only_h3), 0.0, &[0.0, 0.0, 3.0], &[0.0, 0.0, 3.0], &[0.0], &[0.0]);
    assert_eq!(e.value, 9.0);

    let c = LqCoefficients { f: [2.0, 0.0, 0.0], h: [4.0, 0.0, 0.0], ..Default::default() };
    let e = hamiltonian(&lq(c), 0.0, &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[1.0], &[0.0]);
    assert_eq!(e.value, 4.0);
}

#[test]
fn hamiltonian_p_and_q_partials_are_the_coefficients() {
    let spec = lq(sample_lq());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let law: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for _ in 0..20 {
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p = [rng.gen_range(-2.0..2.0)];
        let q = [rng.gen_range(-2.0..2.0)];
        let e = hamiltonian(&spec, 0.3, &x, &law, &p, &q);
        let mut f = [0.0];
        let mut g = [0.0];
        let stats = mfbdsde::law::statistics(spec.f.as_ref(), &law);
        mfbdsde::law::evaluate(spec.f.as_ref(), 0.3, &x, &stats, &law, &mut f);
        mfbdsde::law::evaluate(spec.g.as_ref(), 0.3, &x, &stats, &law, &mut g);
        assert!((e.dp[0] - f[0]).abs() <= 1e-12 && (e.dq[0] - g[0]).abs() <= 1e-12);
        // Central differences in p and q.
        let eps = 1e-5;
        let fd_p = (hamiltonian(&spec, 0.3, &x, &law, &[p[0] + eps], &q).value
            - hamiltonian(&spec, 0.3, &x, &law, &[p[0] - eps], &q).value)
            / (2.0 * eps);
        let fd_q = (hamiltonian(&spec, 0.3, &x, &law, &p, &[q[0] + eps]).value
            - hamiltonian(&spec, 0.3, &x, &law, &p, &[q[0] - eps]).value)
            / (2.0 * eps);
        assert!((fd_p - f[0]).abs() <= 1e-6 * f[0].abs().max(1.0));
        assert!((fd_q - g[0]).abs() <= 1e-6 * g[0].abs().max(1.0));
    }
}

#[test]
fn adjoint_initial_examples() {
    let phi = QuadraticMeanField::diagonal(&[1.0], &[0.0]);
    let y0 = [0.5, -1.5, 2.0];
    assert_eq!(adjoint_initial(&phi, &y0).unwrap(), y0.to_vec());

    let phi = QuadraticMeanField::diagonal(&[2.0], &[0.0]);
    assert_eq!(adjoint_initial(&phi, &[3.0]).unwrap(), vec![6.0]);

    let phi = QuadraticMeanField::diagonal(&[0.0], &[1.0]);
    let p0 = adjoint_initial(&phi, &[4.0, 6.0, 5.0]).unwrap();
    assert!(p0.iter().all(|v| (v - 5.0).abs() < 1e-15), "{p0:?}");
}

fn linear_h_spec(a: f64, c: f64) -> ProblemSpec {
    ProblemSpec {
        dims: Dims { n: 1, l: 1, d: 1 },
        k: 1,
        f: Arc::new(LinearMeanField::zero(3, 1)),
        g: Arc::new(LinearMeanField::zero(3, 1)),
        h: Arc::new(LocalFn {
            in_dim: 3,
            out_dim: 1,
            value: Box::new(move |_, x, _, o| o[0] = a * x[0]),
            jac_x: Box::new(move |_, _, _, o| o.copy_from_slice(&[a, 0.0, 0.0])),
        }),
        phi: Arc::new(LocalFn {
            in_dim: 1,
            out_dim: 1,
            value: Box::new(move |_, x, _, o| o[0] = c * x[0]),
            jac_x: Box::new(move |_, _, _, o| o[0] = c),
        }),
        terminal: Terminal::AffineW { offset: vec![0.0], slope: vec![1.0] },
        admissible: BoxSet::whole_space(1),
    }
}

fn solve_pair(spec: &ProblemSpec, paths: &DriverPaths, cfg: &SolveConfig) -> (mfbdsde::bdsde::EnsembleSolution, Control, AdjointSolution) {
    let u = Control::constant(paths.n_steps(), paths.n_particles, &[0.1]);
    let state = mfbdsde::problem::solve_mf_bdsde(spec, &u, paths, cfg).unwrap();
    let adj = solve_adjoint(spec, &state, &u, paths, cfg).unwrap();
    (state, u, adj)
}

#[test]
fn constant_and_linear_adjoints() {
    let grid = build_grid(1.0, 8).unwrap();
    let mc = sample_paths(&grid, 200, 1, 1, 3, DriverMode::Gaussian, DEFAULT_TREE_CAP).unwrap();
    let tree = tree_paths(&build_grid(1.0, 4).unwrap(), 1, 1, DEFAULT_TREE_CAP).unwrap();
    for (paths, cfg) in [(&mc, SolveConfig::default()), (&tree, SolveConfig::tree())] {
        let n = paths.n_steps();
        for a in [0.0, 0.8] {
            let spec = linear_h_spec(a, 1.5);
            let (_, _, adj) = solve_pair(&spec, paths, &cfg);
            for i in 0..=n {
                let t = paths.grid.t(i);
                assert!(adj.p[i].iter().all(|p| (p - (1.5 + a * t)).abs() < 1e-10), "a = {a}, i = {i}");
            }
            if paths.is_full_tree() {
                assert!(adj.q.iter().flatten().all(|q| q.abs() < 1e-12));
            } else {
                // The estimator keeps the in-sample regression image of p ΔB / dt,
                // which is what makes the discrete gradient exact.
                let dt = paths.grid.dt;
                for i in 0..n {
                    let db: Vec<f64> = (0..paths.n_particles).map(|k| paths.b_increment(k, i)[0]).collect();
                    let image = Projector::new(paths, i, &cfg.regression).unwrap().project(&db, 1).unwrap();
                    let p = 1.5 + a * paths.grid.t(i);
                    for (q, e) in adj.q[i].iter().zip(&image) {
                        assert!((q - p * e / dt).abs() < 1e-7, "step {i}: {q} vs {}", p * e / dt);
                    }
                }
            }
        }
    }
}

/// Exact forward induction for the scalar LQ adjoint on a full tree.
///
/// `M_0 = p_0`; then `A_i = E[M_i | F_{i+1}]`, `Q_i = E[M_i ΔB_i | F_{i+1}] / dt` and
/// `M_{i+1} = A_i + F_i dt + G_i ΔW_{i+1}` with `(F_i, G_i)` the LQ adjoint
/// coefficients at `(θ_{i+1}, A_i, Q_i)`. Returns `(p, p_ahead, q)` with
/// `p_j = E[M_j | F_j]`.
type Fields = Vec<Vec<f64>>;

fn tree_adjoint_oracle(c: &LqCoefficients, state: &mfbdsde::bdsde::EnsembleSolution, paths: &DriverPaths) -> (Fields, Fields, Fields) {
    let n = paths.n_steps();
    let m = paths.n_particles;
    let dt = paths.grid.dt;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    // Average over particles sharing ΔW_j for j < w_upto and ΔB_j for j >= b_from.
    let cond = |w_upto: usize, b_from: usize, v: &[f64]| -> Vec<f64> {
        (0..m)
            .map(|a| {
                let same = |b: usize| {
                    (0..w_upto).all(|j| paths.w_increment(a, j)[0] == paths.w_increment(b, j)[0])
                        && (b_from..n).all(|j| paths.b_increment(a, j)[0] == paths.b_increment(b, j)[0])
                };
                let members: Vec<usize> = (0..m).filter(|&b| same(b)).collect();
                members.iter().map(|&b| v[b]).sum::<f64>() / members.len() as f64
            })
            .collect()
    };
    let ey0 = mean(&state.y[0]);
    let mut mult: Vec<f64> = state.y[0].iter().map(|y| c.phi * y + c.phibar * ey0).collect();
    let mut p = vec![mult.clone()];
    let (mut ahead, mut q) = (Vec::new(), Vec::new());
    for i in 0..n {
        let (y, z) = (&state.y[i + 1], &state.z[i + 1]);
        let (ey, ez) = (mean(y), mean(z));
        let a = cond(i + 1, i + 1, &mult);
        let with_db: Vec<f64> = (0..m).map(|k| mult[k] * paths.b_increment(k, i)[0]).collect();
        let qi: Vec<f64> = cond(i + 1, i + 1, &with_db).iter().map(|v| v / dt).collect();
        let (ea, eq) = (mean(&a), mean(&qi));
        mult = (0..m)
            .map(|k| {
                let ff = c.f[0] * a[k] + c.fbar[0] * ea + c.g[0] * qi[k] + c.gbar[0] * eq + c.h[0] * y[k] + c.hbar[0] * ey;
                let gg = c.f[1] * a[k] + c.fbar[1] * ea + c.g[1] * qi[k] + c.gbar[1] * eq + c.h[1] * z[k] + c.hbar[1] * ez;
                let dw = if i + 1 < n { paths.w_increment(k, i + 1)[0] } else { 0.0 };
                a[k] + ff * dt + gg * dw
            })
            .collect();
        p.push(cond(i + 1, i + 1, &mult));
        ahead.push(a);
        q.push(qi);
    }
    (p, ahead, q)
}

#[test]
fn lq_adjoint_on_two_step_tree_matches_forward_induction() {
    let c = sample_lq();
    let spec = lq(c.clone());
    let grid = build_grid(1.0, 2).unwrap();
    let paths = tree_paths(&grid, 1, 1, DEFAULT_TREE_CAP).unwrap();
    // Controls of step i only read information at t_{i+1}.
    let u = Control {
        k: 1,
        values: (0..2).map(|i| (0..paths.n_particles).map(|p| 0.3 * paths.w_value(p, i + 1)[0] - 0.2 * i as f64).collect()).collect(),
    };
    let state = solve_on_tree(&spec, &u, &paths).unwrap();
    let (p, ahead, q) = tree_adjoint_oracle(&c, &state, &paths);
    let engine = solve_adjoint(&spec, &state, &u, &paths, &SolveConfig::tree()).unwrap();
    let exact = solve_adjoint_on_tree(&spec, &state, &u, &paths).unwrap();
    for sol in [&engine, &exact] {
        for a in 0..paths.n_particles {
            for i in 0..=2 {
                assert!((sol.p[i][a] - p[i][a]).abs() <= 1e-12, "p[{i}][{a}] {} vs {}", sol.p[i][a], p[i][a]);
            }
            for i in 0..2 {
                assert!((sol.p_ahead[i][a] - ahead[i][a]).abs() <= 1e-12, "p_ahead[{i}][{a}]");
                assert!((sol.q[i][a] - q[i][a]).abs() <= 1e-12, "q[{i}][{a}] {} vs {}", sol.q[i][a], q[i][a]);
            }
        }
    }
    let res = adjoint_residual(&spec, &state, &u, &exact, &paths).unwrap();
    assert!(res.iter().all(|r| *r <= 1e-10), "{res:?}");
}

#[test]
fn reversal_is_an_involution_and_swaps_drivers() {
    let grid = build_grid(1.0, 1).unwrap();
    let paths = sample_paths(&grid, 5, 1, 1, 8, DriverMode::Gaussian, DEFAULT_TREE_CAP).unwrap();
    let grid_fields = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
    let step_fields = vec![vec![5.0, 6.0], vec![0.0, 0.0]];
    let (rev, gf, sf) = reverse_time_transform(&paths, &grid_fields, &step_fields).unwrap();
    for p in 0..5 {
        assert_eq!(rev.w_increment(p, 0), paths.b_increment(p, 0));
        assert_eq!(rev.b_increment(p, 0), paths.w_increment(p, 0));
    }
    assert_eq!(sf, step_fields);
    let (back, gf2, sf2) = reverse_time_transform(&rev, &gf, &sf).unwrap();
    for p in 0..5 {
        assert_eq!(back.w_increment(p, 0), paths.w_increment(p, 0));
        assert_eq!(back.b_increment(p, 0), paths.b_increment(p, 0));
    }
    assert_eq!(gf2, grid_fields);
    assert_eq!(sf2, step_fields);
    assert!(reverse_time_transform(&paths, &grid_fields[..1], &step_fields).is_err());
}

#[test]
fn residual_passes_iff_it_passes_before_reversal() {
    // No running cost in y and no z-dependence: F does not vary with ΔW_i, so
    // the tree scheme satisfies the integrated identity exactly.
    let c = LqCoefficients { h: [0.0, 0.0, 2.0], hbar: [0.0; 3], f: [0.4, 0.0, 1.0], fbar: [0.1, 0.0, 0.3], g: [0.3, 0.0, 0.5], gbar: [0.1, 0.0, 0.2], ..sample_lq() };
    let spec = lq(c);
    let grid = build_grid(1.0, 2).unwrap();
    let paths = tree_paths(&grid, 1, 1, DEFAULT_TREE_CAP).unwrap();
    let u = Control::constant(2, paths.n_particles, &[0.3]);
    let state = solve_on_tree(&spec, &u, &paths).unwrap();
    let mut adj = solve_adjoint_on_tree(&spec, &state, &u, &paths).unwrap();
    assert!(adjoint_residual(&spec, &state, &u, &adj, &paths).unwrap().iter().all(|r| *r <= 1e-10));
    adj.p_ahead[0][0] += 0.5;
    let bad = adjoint_residual(&spec, &state, &u, &adj, &paths).unwrap();
    assert!(bad[1] > 1e-3, "{bad:?}");
}

/// Per-particle `<p_n, y_n> - <p_0, y_0> - Σ (F y - f p + G z - g q) dt`, with the
/// adjoint coefficients of step `i` at `(θ_{i+1}, p_ahead_i, q_i)`.
fn product_rule_gap(c: &LqCoefficients, spec: &ProblemSpec, paths: &DriverPaths, cfg: &SolveConfig) -> Vec<f64> {
    let (state, u, adj) = solve_pair(spec, paths, cfg);
    let n = paths.n_steps();
    let dt = paths.grid.dt;
    let m = paths.n_particles;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let rows = mfbdsde::adjoint::theta_rows(spec, &state, &u);
    let mut sum = vec![0.0; m];
    for i in 0..n {
        let (pa, qi) = (&adj.p_ahead[i], &adj.q[i]);
        let grad = hamiltonian_gradients(spec, paths.grid.t(i + 1), &rows[i], pa, qi).unwrap();
        let (y, z, uu) = (&state.y[i + 1], &state.z[i + 1], &u.values[i]);
        let (ey, ez, eu) = (mean(y), mean(z), mean(uu));
        for a in 0..m {
            let f = c.f[0] * y[a] + c.f[1] * z[a] + c.f[2] * uu[a] + c.fbar[0] * ey + c.fbar[1] * ez + c.fbar[2] * eu;
            let g = c.g[0] * y[a] + c.g[1] * z[a] + c.g[2] * uu[a] + c.gbar[0] * ey + c.gbar[1] * ez + c.gbar[2] * eu;
            let (ff, gg) = (grad[a * 3], grad[a * 3 + 1]);
            sum[a] += (ff * y[a] - f * pa[a] + gg * z[a] - g * qi[a]) * dt;
        }
    }
    (0..m).map(|a| adj.p[n][a] * state.y[n][a] - adj.p[0][a] * state.y[0][a] - sum[a]).collect()
}

#[test]
fn duality_with_the_state_matches_the_product_rule() {
    // d<p, y> = (<F, y> - <f, p> + G z - g q) dt + martingale terms.
    let c = sample_lq();
    let spec = lq(c.clone());
    let tree = tree_paths(&build_grid(1.0, 4).unwrap(), 1, 1, DEFAULT_TREE_CAP).unwrap();
    let exact = product_rule_gap(&c, &spec, &tree, &SolveConfig::tree());
    let mean = exact.iter().sum::<f64>() / exact.len() as f64;
    assert!(mean.abs() <= 1e-12, "{mean}");
    let paths = sample_paths(&build_grid(1.0, 20).unwrap(), 20_000, 1, 1, 21, DriverMode::Gaussian, DEFAULT_TREE_CAP).unwrap();
    let est = mfbdsde::bdsde::Estimate::from_samples(&product_rule_gap(&c, &spec, &paths, &SolveConfig::default()), 0.0);
    assert!(est.within(3.0), "{est:?}");
}

fn random_rows(rng: &mut ChaCha8Rng, m: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows: Vec<f64> = (0..3 * m).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let p: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let q: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (rows, p, q)
}

fn scalar_spec() -> ProblemSpec {
    // f = sin(y) z + u r + r², r = E[y² + z u]
    let f = ScalarInteraction {
        in_dim: 3,
        out_dim: 1,
        stat_dim: 1,
        stat: Box::new(|x, o| o[0] = x[0] * x[0] + x[1] * x[2]),
        stat_jac: Box::new(|x, o| o.copy_from_slice(&[2.0 * x[0], x[2], x[1]])),
        value: Box::new(|_, x, s, o| o[0] = x[0].sin() * x[1] + x[2] * s[0] + s[0] * s[0]),
        jac_x: Box::new(|_, x, s, o| o.copy_from_slice(&[x[0].cos() * x[1], x[0].sin(), s[0]])),
        jac_s: Box::new(|_, x, s, o| o[0] = x[2] + 2.0 * s[0]),
    };
    // g = 0.3 y + 0.2 r z, r = E[y z]
    let g = ScalarInteraction {
        in_dim: 3,
        out_dim: 1,
        stat_dim: 1,
        stat: Box::new(|x, o| o[0] = x[0] * x[1]),
        stat_jac: Box::new(|x, o| o.copy_from_slice(&[x[1], x[0], 0.0])),
        value: Box::new(|_, x, s, o| o[0] = 0.3 * x[0] + 0.2 * s[0] * x[1]),
        jac_x: Box::new(|_, _, s, o| o.copy_from_slice(&[0.3, 0.2 * s[0], 0.0])),
        jac_s: Box::new(|_, x, _, o| o[0] = 0.2 * x[1]),
    };
    // h = y² + r y, r = E[u²]
    let h = ScalarInteraction {
        in_dim: 3,
        out_dim: 1,
        stat_dim: 1,
        stat: Box::new(|x, o| o[0] = x[2] * x[2]),
        stat_jac: Box::new(|x, o| o.copy_from_slice(&[0.0, 0.0, 2.0 * x[2]])),
        value: Box::new(|_, x, s, o| o[0] = x[0] * x[0] + s[0] * x[0]),
        jac_x: Box::new(|_, x, s, o| o.copy_from_slice(&[2.0 * x[0] + s[0], 0.0, 0.0])),
        jac_s: Box::new(|_, x, _, o| o[0] = x[0]),
    };
    ProblemSpec {
        dims: Dims { n: 1, l: 1, d: 1 },
        k: 1,
        f: Arc::new(f),
        g: Arc::new(g),
        h: Arc::new(h),
        phi: Arc::new(QuadraticMeanField::diagonal(&[1.0], &[0.0])),
        terminal: Terminal::Constant(vec![0.0]),
        admissible: BoxSet::whole_space(1),
    }
}

#[test]
fn scalar_interaction_specialization() {
    let spec = scalar_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = 40;
    let (rows, p, q) = random_rows(&mut rng, m);
    let got = hamiltonian_gradients(&spec, 0.0, &rows, &p, &q).unwrap();
    let x = |a: usize| (rows[3 * a], rows[3 * a + 1], rows[3 * a + 2]);
    let avg = |fun: &dyn Fn(usize) -> f64| (0..m).map(fun).sum::<f64>() / m as f64;
    let rf = avg(&|a| x(a).0 * x(a).0 + x(a).1 * x(a).2);
    let rg = avg(&|a| x(a).0 * x(a).1);
    let rh = avg(&|a| x(a).2 * x(a).2);
    // Ẽ[p̃ ∂_r f̂(Θ̃)], Ẽ[q̃ ∂_r ĝ(Θ̃)], Ẽ[∂_r ĥ(Θ̃)]
    let df = avg(&|a| p[a] * (x(a).2 + 2.0 * rf));
    let dg = avg(&|a| q[a] * 0.2 * x(a).1);
    let dh = avg(&|a| x(a).0);
    for a in 0..m {
        let (y, z, u) = x(a);
        let fy = y.cos() * z * p[a] + df * 2.0 * y + 0.3 * q[a] + dg * z + 2.0 * y + rh;
        let fz = y.sin() * p[a] + df * u + 0.2 * rg * q[a] + dg * y;
        let fu = rf * p[a] + df * z + dh * 2.0 * u;
        for (b, want) in [fy, fz, fu].into_iter().enumerate() {
            assert!((got[3 * a + b] - want).abs() <= 1e-10, "particle {a} slot {b}: {} vs {want}", got[3 * a + b]);
        }
    }
}

fn first_order_spec() -> ProblemSpec {
    // f̂ = y z' + u y'², ĝ = 0.1 z y', ĥ = (y - y')²/2 + u u'
    let f = FirstOrderInteraction {
        in_dim: 3,
        out_dim: 1,
        kernel: Box::new(|_, x, xt, o| o[0] = x[0] * xt[1] + x[2] * xt[0] * xt[0]),
        kernel_jac_x: Box::new(|_, _, xt, o| o.copy_from_slice(&[xt[1], 0.0, xt[0] * xt[0]])),
        kernel_jac_xt: Box::new(|_, x, xt, o| o.copy_from_slice(&[2.0 * x[2] * xt[0], x[0], 0.0])),
    };
    let g = FirstOrderInteraction {
        in_dim: 3,
        out_dim: 1,
        kernel: Box::new(|_, x, xt, o| o[0] = 0.1 * x[1] * xt[0]),
        kernel_jac_x: Box::new(|_, _, xt, o| o.copy_from_slice(&[0.0, 0.1 * xt[0], 0.0])),
        kernel_jac_xt: Box::new(|_, x, _, o| o.copy_from_slice(&[0.1 * x[1], 0.0, 0.0])),
    };
    let h = FirstOrderInteraction {
        in_dim: 3,
        out_dim: 1,
        kernel: Box::new(|_, x, xt, o| o[0] = 0.5 * (x[0] - xt[0]).powi(2) + x[2] * xt[2]),
        kernel_jac_x: Box::new(|_, x, xt, o| o.copy_from_slice(&[x[0] - xt[0], 0.0, xt[2]])),
        kernel_jac_xt: Box::new(|_, x, xt, o| o.copy_from_slice(&[xt[0] - x[0], 0.0, x[2]])),
    };
    ProblemSpec {
        dims: Dims { n: 1, l: 1, d: 1 },
        k: 1,
        f: Arc::new(f),
        g: Arc::new(g),
        h: Arc::new(h),
        phi: Arc::new(QuadraticMeanField::diagonal(&[1.0], &[0.0])),
        terminal: Terminal::Constant(vec![0.0]),
        admissible: BoxSet::whole_space(1),
    }
}

#[test]
fn first_order_interaction_specialization() {
    let spec = first_order_spec();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = 30;
    let (rows, p, q) = random_rows(&mut rng, m);
    let got = hamiltonian_gradients(&spec, 0.0, &rows, &p, &q).unwrap();
    let x = |a: usize| (rows[3 * a], rows[3 * a + 1], rows[3 * a + 2]);
    for a in 0..m {
        let y = x(a).0;
        let mut want = [0.0; 3];
        for j in 0..m {
            let (yj, zj, uj) = x(j);
            // Θ in the first slot, Θ̃ in the second.
            want[0] += zj * p[a] + (y - yj);
            want[1] += 0.1 * yj * q[a];
            want[2] += yj * yj * p[a] + uj;
            // Θ̃ in the first slot, Θ in the second.
            want[0] += 2.0 * uj * y * p[j] + 0.1 * zj * q[j] + (y - yj);
            want[1] += yj * p[j];
            want[2] += uj;
        }
        for (b, w) in want.iter().enumerate() {
            let w = w / m as f64;
            assert!((got[3 * a + b] - w).abs() <= 1e-10, "particle {a} slot {b}: {} vs {w}", got[3 * a + b]);
        }
    }
    let phi = FirstOrderInteraction {
        in_dim: 1,
        out_dim: 1,
        kernel: Box::new(|_, x, xt, o| o[0] = x[0] * xt[0] * xt[0]),
        kernel_jac_x: Box::new(|_, _, xt, o| o[0] = xt[0] * xt[0]),
        kernel_jac_xt: Box::new(|_, x, xt, o| o[0] = 2.0 * x[0] * xt[0]),
    };
    let y0 = [0.5, -1.0, 2.0];
    let p0 = adjoint_initial(&phi as &dyn MeanFieldFn, &y0).unwrap();
    for (a, ya) in y0.iter().enumerate() {
        let want: f64 = y0.iter().map(|yj| yj * yj + 2.0 * yj * ya).sum::<f64>() / 3.0;
        assert!((p0[a] - want).abs() < 1e-12);
    }
}
