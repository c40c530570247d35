//! Cost functional, Gateaux derivatives, projected-gradient optimization,
//! maximum-principle residuals and a numeric sufficiency check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::adjoint::{hamiltonian_gradients, solve_adjoint, theta_rows, AdjointSolution};
use crate::bdsde::{self, BdsdeModel, Dims, EnsembleSolution, Estimate, SolveConfig, StepView};
use crate::drivers::DriverPaths;
use crate::error::{invalid, Result};
use crate::law::{evaluate, jacobian_x, statistics, MeanFieldFn};
use crate::parallel;
use crate::problem::{solve_mf_bdsde, stack_rows, BoxSet, Control, ProblemSpec};

fn times(paths: &DriverPaths) -> Vec<f64> {
    (0..paths.n_steps()).map(|i| paths.grid.t(i + 1)).collect()
}

/// Per-particle cost samples `Σ_i h(θ_{i+1}) dt + Φ(y_0)`, each against its ensemble law.
pub fn cost_samples(spec: &ProblemSpec, state: &EnsembleSolution, u: &Control, dt: f64) -> Vec<f64> {
    let rows = state.n_particles;
    let dw = spec.x_width();
    let n = spec.dims.n;
    let mut out = vec![0.0; rows];
    for (i, theta) in theta_rows(spec, state, u).iter().enumerate() {
        let h = spec.h.as_ref();
        let stats = statistics(h, theta);
        let t = (i + 1) as f64 * dt;
        let mut vals = vec![0.0; rows];
        parallel::fill_rows(&mut vals, 1, |p, o| evaluate(h, t, &theta[p * dw..(p + 1) * dw], &stats, theta, o));
        for (o, v) in out.iter_mut().zip(&vals) {
            *o += v * dt;
        }
    }
    let phi = spec.phi.as_ref();
    let y0 = &state.y[0];
    let stats = statistics(phi, y0);
    let mut vals = vec![0.0; rows];
    parallel::fill_rows(&mut vals, 1, |p, o| evaluate(phi, 0.0, &y0[p * n..(p + 1) * n], &stats, y0, o));
    for (o, v) in out.iter_mut().zip(&vals) {
        *o += v;
    }
    out
}

/// `J(u)` as an ensemble mean with its standard error.
pub fn evaluate_cost(spec: &ProblemSpec, state: &EnsembleSolution, u: &Control, paths: &DriverPaths) -> Estimate {
    Estimate::from_samples(&cost_samples(spec, state, u, paths.grid.dt), f64::NAN)
}

/// Solve the state for `u` and return the cost samples.
pub fn cost_of(spec: &ProblemSpec, u: &Control, paths: &DriverPaths, cfg: &SolveConfig) -> Result<Vec<f64>> {
    let state = solve_mf_bdsde(spec, u, paths, cfg)?;
    Ok(cost_samples(spec, &state, u, paths.grid.dt))
}

/// Directional derivative of a coefficient along `dx` rows, including the
/// law term `Ẽ[∂_μ c(x)(x̃) dx̃]`. Returns `N x out_dim`.
pub fn tangent(c: &dyn MeanFieldFn, t: f64, rows: &[f64], dx: &[f64]) -> Vec<f64> {
    let d = c.in_dim();
    let m = c.out_dim();
    let r = c.stat_dim();
    let n = rows.len() / d;
    let stats = statistics(c, rows);
    // Ẽ[∂stat(x̃) dx̃], shared by every particle.
    let moved = if r > 0 {
        let s = parallel::vec_sum_by(n, r, |j, acc| {
            let mut sj = vec![0.0; r * d];
            c.stat_jac(&rows[j * d..(j + 1) * d], &mut sj);
            for a in 0..r {
                acc[a] += (0..d).map(|b| sj[a * d + b] * dx[j * d + b]).sum::<f64>();
            }
        });
        s.into_iter().map(|v| v / n as f64).collect()
    } else {
        Vec::new()
    };
    let mut out = vec![0.0; n * m];
    parallel::fill_rows(&mut out, m, |p, o| {
        let x = &rows[p * d..(p + 1) * d];
        let dxp = &dx[p * d..(p + 1) * d];
        let mut jac = vec![0.0; m * d];
        jacobian_x(c, t, x, &stats, rows, &mut jac);
        for a in 0..m {
            o[a] = (0..d).map(|b| jac[a * d + b] * dxp[b]).sum();
        }
        if r > 0 {
            let mut js = vec![0.0; m * r];
            c.jac_s(t, x, &stats, &mut js);
            for a in 0..m {
                o[a] += (0..r).map(|k| js[a * r + k] * moved[k]).sum::<f64>();
            }
        }
        if c.has_kernel() {
            let mut kj = vec![0.0; m * d];
            for j in 0..n {
                c.kernel_jac_xt(t, x, &rows[j * d..(j + 1) * d], &mut kj);
                for a in 0..m {
                    o[a] += (0..d).map(|b| kj[a * d + b] * dx[j * d + b]).sum::<f64>() / n as f64;
                }
            }
        }
    });
    out
}

/// `(K, L)` of the variational equation; `K[n] = 0`.
pub type VariationalSolution = EnsembleSolution;

/// Linearized state equation along direction `v`, with `K_T = 0`.
struct VariationalModel<'a> {
    spec: &'a ProblemSpec,
    theta: Vec<Vec<f64>>,
    times: Vec<f64>,
    v: &'a Control,
}

impl BdsdeModel for VariationalModel<'_> {
    fn dims(&self) -> Dims {
        self.spec.dims
    }

    // The law terms are linear in (K̃, L̃), which the sweep already holds at
    // step i + 1, so one sweep solves the equation.
    fn mean_field(&self) -> bool {
        false
    }

    fn terminal(&self, _paths: &DriverPaths, out: &mut [f64]) -> Result<()> {
        out.fill(0.0);
        Ok(())
    }

    fn coefficients(&self, view: &StepView, f: &mut [f64], g: &mut [f64]) -> Result<()> {
        let s = self.spec;
        let i = view.step;
        let dx = stack_rows(view.y, view.z, &self.v.values[i], s.dims.n, s.dims.z_width(), s.k);
        f.copy_from_slice(&tangent(s.f.as_ref(), self.times[i], &self.theta[i], &dx));
        g.copy_from_slice(&tangent(s.g.as_ref(), self.times[i], &self.theta[i], &dx));
        Ok(())
    }
}

fn check_direction(spec: &ProblemSpec, v: &Control, paths: &DriverPaths) -> Result<()> {
    if v.k != spec.k || v.n_steps() != paths.n_steps() || v.values.iter().any(|r| r.len() != paths.n_particles * spec.k) {
        return Err(invalid("direction shape does not match the problem"));
    }
    Ok(())
}

/// Solve the variational equation for direction `v` around a solved state.
pub fn solve_variational(
    spec: &ProblemSpec,
    state: &EnsembleSolution,
    u: &Control,
    v: &Control,
    paths: &DriverPaths,
    cfg: &SolveConfig,
) -> Result<VariationalSolution> {
    check_direction(spec, v, paths)?;
    let model = VariationalModel { spec, theta: theta_rows(spec, state, u), times: times(paths), v };
    bdsde::solve_model(&model, paths, cfg)
}

/// Variational equation by exact backward induction on a full tree.
pub fn solve_variational_on_tree(
    spec: &ProblemSpec,
    state: &EnsembleSolution,
    u: &Control,
    v: &Control,
    paths: &DriverPaths,
) -> Result<VariationalSolution> {
    check_direction(spec, v, paths)?;
    let model = VariationalModel { spec, theta: theta_rows(spec, state, u), times: times(paths), v };
    bdsde::solve_model_on_tree(&model, paths, 1e-14)
}

/// Per-step gradient rows `∂_u H + Ẽ[∂_{μ_u} H]` (`N x k` each).
pub fn control_gradient(
    spec: &ProblemSpec,
    state: &EnsembleSolution,
    adj: &AdjointSolution,
    u: &Control,
    paths: &DriverPaths,
) -> Result<Vec<Vec<f64>>> {
    let dw = spec.x_width();
    let k = spec.k;
    let ts = times(paths);
    theta_rows(spec, state, u)
        .iter()
        .enumerate()
        .map(|(i, rows)| {
            let full = hamiltonian_gradients(spec, ts[i], rows, &adj.p_ahead[i], &adj.q[i])?;
            Ok(full.chunks(dw).flat_map(|r| r[dw - k..].to_vec()).collect())
        })
        .collect()
}

/// Both derivative routes with standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateauxDerivative {
    /// Through `(K, L)`.
    pub route1: Estimate,
    /// Through the adjoint.
    pub route2: Estimate,
    /// Per-particle difference `route1 - route2` with its standard error.
    pub gap: Estimate,
}

/// Route-2 derivative samples `Σ_i <grad_i, v_i> dt` per particle.
pub fn adjoint_derivative_samples(grad: &[Vec<f64>], v: &Control, dt: f64) -> Vec<f64> {
    let k = v.k;
    let rows = v.values.first().map_or(0, |r| r.len() / k);
    let mut out = vec![0.0; rows];
    for (g, vv) in grad.iter().zip(&v.values) {
        for p in 0..rows {
            out[p] += (0..k).map(|j| g[p * k + j] * vv[p * k + j]).sum::<f64>() * dt;
        }
    }
    out
}

/// Route-1 derivative samples from the variational solution.
pub fn variational_derivative_samples(
    spec: &ProblemSpec,
    state: &EnsembleSolution,
    var: &VariationalSolution,
    u: &Control,
    v: &Control,
    paths: &DriverPaths,
) -> Vec<f64> {
    let dt = paths.grid.dt;
    let (n, nz, k) = (spec.dims.n, spec.dims.z_width(), spec.k);
    let ts = times(paths);
    let mut out = vec![0.0; state.n_particles];
    for (i, theta) in theta_rows(spec, state, u).iter().enumerate() {
        let dx = stack_rows(&var.y[i + 1], &var.z[i + 1], &v.values[i], n, nz, k);
        for (o, d) in out.iter_mut().zip(tangent(spec.h.as_ref(), ts[i], theta, &dx)) {
            *o += d * dt;
        }
    }
    for (o, d) in out.iter_mut().zip(tangent(spec.phi.as_ref(), 0.0, &state.y[0], &var.y[0])) {
        *o += d;
    }
    out
}

/// Gateaux derivative of `J` at `u` in direction `v` by both routes.
pub fn gateaux_derivative(
    spec: &ProblemSpec,
    state: &EnsembleSolution,
    adj: &AdjointSolution,
    u: &Control,
    v: &Control,
    paths: &DriverPaths,
    cfg: &SolveConfig,
) -> Result<GateauxDerivative> {
    let var = solve_variational(spec, state, u, v, paths, cfg)?;
    let r1 = variational_derivative_samples(spec, state, &var, u, v, paths);
    let grad = control_gradient(spec, state, adj, u, paths)?;
    let r2 = adjoint_derivative_samples(&grad, v, paths.grid.dt);
    let gap: Vec<f64> = r1.iter().zip(&r2).map(|(a, b)| a - b).collect();
    Ok(GateauxDerivative {
        route1: Estimate::from_samples(&r1, f64::NAN),
        route2: Estimate::from_samples(&r2, f64::NAN),
        gap: Estimate::from_samples(&gap, 0.0),
    })
}

/// Central difference `(J(u + εv) - J(u - εv)) / 2ε` on the same paths.
pub fn finite_difference(
    spec: &ProblemSpec,
    u: &Control,
    v: &Control,
    eps: f64,
    paths: &DriverPaths,
    cfg: &SolveConfig,
) -> Result<f64> {
    let mean = |s: Vec<f64>| parallel::sum_by(s.len(), |i| s[i]) / s.len() as f64;
    let plus = mean(cost_of(spec, &u.axpy(eps, v), paths, cfg)?);
    let minus = mean(cost_of(spec, &u.axpy(-eps, v), paths, cfg)?);
    Ok((plus - minus) / (2.0 * eps))
}

/// Clip every control value into the box.
pub fn project(u: &Control, set: &BoxSet) -> Control {
    let mut out = u.clone();
    out.project(set);
    out
}

/// Violated part of the variational inequality per step and particle.
#[derive(Debug, Clone, PartialEq)]
pub struct SmpResidual {
    /// `per_step[i][p]`: Euclidean norm over control coordinates.
    pub per_step: Vec<Vec<f64>>,
    pub sup: f64,
}

/// Residual of `<grad, a - u> >= 0` for all `a` in the box, from gradient rows.
pub fn smp_residual_from_gradient(grad: &[Vec<f64>], u: &Control, set: &BoxSet) -> SmpResidual {
    let k = u.k;
    let per_step: Vec<Vec<f64>> = grad
        .iter()
        .zip(&u.values)
        .map(|(g, uv)| {
            g.chunks(k)
                .zip(uv.chunks(k))
                .map(|(gr, ur)| {
                    (0..k)
                        .map(|j| {
                            let at_lower = ur[j] <= set.lower[j];
                            let at_upper = ur[j] >= set.upper[j];
                            let viol = match (at_lower, at_upper) {
                                (true, true) => 0.0,
                                (true, false) => (-gr[j]).max(0.0),
                                (false, true) => gr[j].max(0.0),
                                (false, false) => gr[j].abs(),
                            };
                            viol * viol
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();
    let sup = per_step.iter().flatten().fold(0.0f64, |a, b| a.max(*b));
    SmpResidual { per_step, sup }
}

/// Maximum-principle residual at a solved `(state, adjoint)` pair.
pub fn smp_residual(
    spec: &ProblemSpec,
    state: &EnsembleSolution,
    adj: &AdjointSolution,
    u: &Control,
    paths: &DriverPaths,
) -> Result<SmpResidual> {
    let grad = control_gradient(spec, state, adj, u, paths)?;
    Ok(smp_residual_from_gradient(&grad, u, &spec.admissible))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Initial step of every line search.
    pub step: f64,
    pub shrink: f64,
    pub armijo: f64,
    pub max_halvings: usize,
    /// Stop when the sup of the maximum-principle residual drops below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Random directions in the sufficiency check.
    pub m_directions: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { step: 1.0, shrink: 0.5, armijo: 1e-4, max_halvings: 30, tol: 1e-3, max_iters: 200, m_directions: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    /// `J` at every iterate, starting with the initial control.
    pub costs: Vec<f64>,
    pub cost_std_errors: Vec<f64>,
    /// `sqrt(E Σ |grad|² dt)` at every iterate.
    pub gradient_norms: Vec<f64>,
    /// Sup of the maximum-principle residual at every iterate.
    pub smp_residuals: Vec<f64>,
    /// Accepted step sizes.
    pub step_sizes: Vec<f64>,
    pub termination: Termination,
    pub iterations: usize,
}

struct Iterate {
    state: EnsembleSolution,
    cost: Vec<f64>,
}

fn mean(s: &[f64]) -> f64 {
    parallel::sum_by(s.len(), |i| s[i]) / s.len() as f64
}

/// Projected gradient descent with Armijo backtracking on `J`.
pub fn optimize(
    spec: &ProblemSpec,
    u0: &Control,
    paths: &DriverPaths,
    cfg: &SolveConfig,
    opt: &OptimizerConfig,
) -> Result<(Control, OptimizationReport)> {
    if !(opt.step > 0.0) || !(opt.shrink > 0.0 && opt.shrink < 1.0) || !(opt.armijo > 0.0 && opt.armijo < 1.0) {
        return Err(invalid("line search needs step > 0 and shrink, armijo in (0, 1)"));
    }
    let dt = paths.grid.dt;
    let mut u = u0.clone();
    let state = solve_mf_bdsde(spec, &u, paths, cfg)?;
    let cost = cost_samples(spec, &state, &u, dt);
    let mut it = Iterate { state, cost };
    let mut report = OptimizationReport {
        costs: Vec::new(),
        cost_std_errors: Vec::new(),
        gradient_norms: Vec::new(),
        smp_residuals: Vec::new(),
        step_sizes: Vec::new(),
        termination: Termination::MaxIterations,
        iterations: 0,
    };
    for iter in 0..=opt.max_iters {
        let est = Estimate::from_samples(&it.cost, f64::NAN);
        let adj = solve_adjoint(spec, &it.state, &u, paths, cfg)?;
        let grad = control_gradient(spec, &it.state, &adj, &u, paths)?;
        let res = smp_residual_from_gradient(&grad, &u, &spec.admissible);
        let gnorm = (grad.iter().map(|g| mean(&g.chunks(u.k).map(|r| r.iter().map(|x| x * x).sum()).collect::<Vec<f64>>())).sum::<f64>() * dt).sqrt();
        report.costs.push(est.mean);
        report.cost_std_errors.push(est.std_error);
        report.gradient_norms.push(gnorm);
        report.smp_residuals.push(res.sup);
        report.iterations = iter;
        if res.sup < opt.tol {
            report.termination = Termination::Converged;
            break;
        }
        if iter == opt.max_iters {
            break;
        }
        let gctl = Control { k: u.k, values: grad };
        let j0 = est.mean;
        let mut eta = opt.step;
        let mut accepted = None;
        for _ in 0..=opt.max_halvings {
            let cand = project(&u.axpy(-eta, &gctl), &spec.admissible);
            let dir = cand.axpy(-1.0, &u);
            let slope = mean(&adjoint_derivative_samples(&gctl.values, &dir, dt));
            let state = solve_mf_bdsde(spec, &cand, paths, cfg)?;
            let cost = cost_samples(spec, &state, &cand, dt);
            if mean(&cost) <= j0 + opt.armijo * slope {
                accepted = Some((cand, Iterate { state, cost }));
                break;
            }
            eta *= opt.shrink;
        }
        match accepted {
            Some((cand, next)) => {
                u = cand;
                it = next;
                report.step_sizes.push(eta);
            }
            None => {
                report.termination = Termination::LineSearchFailed;
                break;
            }
        }
    }
    Ok((u, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SufficiencyConfig {
    pub directions: usize,
    pub eps_grid: Vec<f64>,
    /// Random segments in the convexity probe.
    pub convexity_segments: usize,
    /// Points per sampled law in the convexity probe.
    pub probe_particles: usize,
    /// Standard errors allowed before a perturbation counts as a violation.
    pub sigmas: f64,
    pub seed: u64,
}

impl Default for SufficiencyConfig {
    fn default() -> Self {
        SufficiencyConfig {
            directions: 100,
            eps_grid: vec![0.1],
            convexity_segments: 200,
            probe_particles: 16,
            sigmas: 3.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationTrial {
    pub direction: usize,
    pub eps: f64,
    /// `J(u + εv) - J(u)` with its common-random-number standard error.
    pub delta: Estimate,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyReport {
    /// The sampled segments found no convexity violation. This is evidence,
    /// not a proof of convexity.
    pub convexity_probe_passed: bool,
    pub convexity_violations: usize,
    /// Most negative gap of the supporting-hyperplane inequality.
    pub worst_convexity_gap: f64,
    pub trials: Vec<PerturbationTrial>,
    pub violations: usize,
}

impl SufficiencyReport {
    pub fn passed(&self) -> bool {
        self.convexity_probe_passed && self.violations == 0
    }
}

/// Supporting-hyperplane test of `H(·, p, q)` and `Φ` along random segments of
/// sampled laws: `E[H(x') - H(x)] >= E[<∂_x H(x) + Ẽ ∂_μ H(x̃)(x), x' - x>]`.
pub fn convexity_probe(spec: &ProblemSpec, cfg: &SufficiencyConfig) -> Result<(bool, usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_c0de);
    let unit = Uniform::new(-2.0, 2.0);
    let m = cfg.probe_particles.max(2);
    let dw = spec.x_width();
    let n = spec.dims.n;
    let g_w = spec.dims.g_width();
    let mut violations = 0;
    let mut worst = 0.0f64;
    let value = |rows: &[f64], p: &[f64], q: &[f64]| -> f64 {
        let mut tot = 0.0;
        for (c, w) in [(spec.f.as_ref(), Some(p)), (spec.g.as_ref(), Some(q)), (spec.h.as_ref(), None)] {
            let od = c.out_dim();
            let stats = statistics(c, rows);
            for a in 0..m {
                let mut o = vec![0.0; od];
                evaluate(c, 0.0, &rows[a * dw..(a + 1) * dw], &stats, rows, &mut o);
                tot += match w {
                    Some(w) => o.iter().zip(&w[a * od..(a + 1) * od]).map(|(x, y)| x * y).sum::<f64>(),
                    None => o[0],
                };
            }
        }
        tot / m as f64
    };
    let phi_value = |ys: &[f64]| -> f64 {
        let stats = statistics(spec.phi.as_ref(), ys);
        (0..m)
            .map(|a| {
                let mut o = [0.0];
                evaluate(spec.phi.as_ref(), 0.0, &ys[a * n..(a + 1) * n], &stats, ys, &mut o);
                o[0]
            })
            .sum::<f64>()
            / m as f64
    };
    for _ in 0..cfg.convexity_segments {
        let x: Vec<f64> = (0..m * dw).map(|_| unit.sample(&mut rng)).collect();
        let x2: Vec<f64> = (0..m * dw).map(|_| unit.sample(&mut rng)).collect();
        let p: Vec<f64> = (0..m * n).map(|_| unit.sample(&mut rng)).collect();
        let q: Vec<f64> = (0..m * g_w).map(|_| unit.sample(&mut rng)).collect();
        let grad = hamiltonian_gradients(spec, 0.0, &x, &p, &q)?;
        let lin = grad.iter().zip(x.iter().zip(&x2)).map(|(g, (a, b))| g * (b - a)).sum::<f64>() / m as f64;
        let gap = value(&x2, &p, &q) - value(&x, &p, &q) - lin;
        let scale = 1e-9 * (1.0 + value(&x2, &p, &q).abs() + value(&x, &p, &q).abs());
        // Φ on the y-blocks of the same points.
        let ys: Vec<f64> = x.chunks(dw).flat_map(|r| r[..n].to_vec()).collect();
        let ys2: Vec<f64> = x2.chunks(dw).flat_map(|r| r[..n].to_vec()).collect();
        let pg = crate::adjoint::adjoint_initial(spec.phi.as_ref(), &ys)?;
        let plin = pg.iter().zip(ys.iter().zip(&ys2)).map(|(g, (a, b))| g * (b - a)).sum::<f64>() / m as f64;
        let pgap = phi_value(&ys2) - phi_value(&ys) - plin;
        let pscale = 1e-9 * (1.0 + phi_value(&ys2).abs() + phi_value(&ys).abs());
        for (g, s) in [(gap, scale), (pgap, pscale)] {
            worst = worst.min(g);
            if g < -s {
                violations += 1;
            }
        }
    }
    Ok((violations == 0, violations, worst))
}

/// Random direction with a per-step common part and a per-particle part.
pub fn random_direction(u: &Control, rng: &mut ChaCha8Rng) -> Control {
    let values = u
        .values
        .iter()
        .map(|row| {
            let common: Vec<f64> = (0..u.k).map(|_| Distribution::<f64>::sample(&StandardNormal, rng)).collect();
            row.chunks(u.k)
                .flat_map(|_| (0..u.k).map(|j| common[j] + 0.5 * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<_>>())
                .collect()
        })
        .collect();
    Control { k: u.k, values }
}

/// Numeric check of the sufficiency statement at a candidate control.
pub fn verify_sufficiency(
    spec: &ProblemSpec,
    candidate: &Control,
    paths: &DriverPaths,
    cfg: &SolveConfig,
    suff: &SufficiencyConfig,
) -> Result<SufficiencyReport> {
    let (passed, convexity_violations, worst) = convexity_probe(spec, suff)?;
    let base = cost_of(spec, candidate, paths, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(suff.seed);
    let mut trials = Vec::new();
    for direction in 0..suff.directions {
        let v = random_direction(candidate, &mut rng);
        for &eps in &suff.eps_grid {
            let trial = project(&candidate.axpy(eps, &v), &spec.admissible);
            let cost = cost_of(spec, &trial, paths, cfg)?;
            let diff: Vec<f64> = cost.iter().zip(&base).map(|(a, b)| a - b).collect();
            let delta = Estimate::from_samples(&diff, 0.0);
            let violated = delta.mean < -suff.sigmas * delta.std_error;
            trials.push(PerturbationTrial { direction, eps, delta, violated });
        }
    }
    let violations = trials.iter().filter(|t| t.violated).count();
    Ok(SufficiencyReport { convexity_probe_passed: passed, convexity_violations, worst_convexity_gap: worst, trials, violations })
}
