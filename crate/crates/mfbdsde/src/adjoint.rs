//! Hamiltonian `H = <f, p> + <g, q> + h` and the adjoint equation
//! `dp = F dt + G dW - q d←B`, `p_0 = ∂_yΦ + Ẽ[∂_{μ_y}Φ]`.
//!
//! The adjoint runs forward in time. Substituting `s = T - t` turns it into a
//! BDSDE on reversed drivers (reversed B forward, reversed W backward), which
//! is solved by the backward engine and then mapped back.

use serde::{Deserialize, Serialize};

use crate::bdsde::{self, BdsdeModel, Dims, EnsembleSolution, Estimator, SolveConfig, SolveDiagnostics, StepView, ZPoint};
use crate::drivers::DriverPaths;
use crate::error::{invalid, Error, Result};
use crate::law::{jacobian_x, statistics, InteractionKind, MeanFieldFn};
use crate::parallel;
use crate::problem::{stack_rows, Control, ProblemSpec};

/// Largest ensemble for the pairwise (kernel) mean-field terms.
pub const PAIRWISE_CAP: usize = 4096;

/// Value and partials of the Hamiltonian at one point, with the law held fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianEval {
    pub value: f64,
    pub dy: Vec<f64>,
    pub dz: Vec<f64>,
    pub du: Vec<f64>,
    /// Equals `f` at the same arguments.
    pub dp: Vec<f64>,
    /// Equals `g` at the same arguments.
    pub dq: Vec<f64>,
}

/// `wᵀ J` for a row-major `m x d` Jacobian.
fn transpose_apply(jac: &[f64], w: &[f64], d: usize, out: &mut [f64]) {
    for (a, wa) in w.iter().enumerate() {
        for b in 0..d {
            out[b] += wa * jac[a * d + b];
        }
    }
}

/// Evaluate `H(t, x, μ, p, q)` where `μ` is the law of `law_rows` (rows `(y, z, u)`).
pub fn hamiltonian(spec: &ProblemSpec, t: f64, x: &[f64], law_rows: &[f64], p: &[f64], q: &[f64]) -> HamiltonianEval {
    let dw = spec.x_width();
    let n = spec.dims.n;
    let nz = spec.dims.z_width();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; spec.dims.g_width()];
    let mut h = vec![0.0; 1];
    let mut grad = vec![0.0; dw];
    for (c, w, out) in [(&spec.f, Some(p), &mut f), (&spec.g, Some(q), &mut g), (&spec.h, None, &mut h)] {
        let stats = statistics(c.as_ref(), law_rows);
        crate::law::evaluate(c.as_ref(), t, x, &stats, law_rows, out);
        let mut jac = vec![0.0; c.out_dim() * dw];
        jacobian_x(c.as_ref(), t, x, &stats, law_rows, &mut jac);
        match w {
            Some(w) => transpose_apply(&jac, w, dw, &mut grad),
            None => transpose_apply(&jac, &[1.0], dw, &mut grad),
        }
    }
    let value = f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() + g.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() + h[0];
    HamiltonianEval {
        value,
        dy: grad[..n].to_vec(),
        dz: grad[n..n + nz].to_vec(),
        du: grad[n + nz..].to_vec(),
        dp: f,
        dq: g,
    }
}

/// `Ẽ[w̃ᵀ ∂_μ c(x̃)(x_self)]` for every particle: rows `N x in_dim`.
///
/// The statistic part is separable and costs O(N); kernels cost O(N²).
pub fn dual_mean_term(c: &dyn MeanFieldFn, t: f64, rows: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    let d = c.in_dim();
    let m = c.out_dim();
    let n = rows.len() / d;
    let mut out = vec![0.0; n * d];
    if c.kind() == InteractionKind::None || n == 0 {
        return Ok(out);
    }
    let r = c.stat_dim();
    let stats = statistics(c, rows);
    if r > 0 {
        let a = parallel::vec_sum_by(n, r, |j, acc| {
            let mut js = vec![0.0; m * r];
            c.jac_s(t, &rows[j * d..(j + 1) * d], &stats, &mut js);
            transpose_apply(&js, &weights[j * m..(j + 1) * m], r, acc);
        });
        let a: Vec<f64> = a.into_iter().map(|v| v / n as f64).collect();
        parallel::fill_rows(&mut out, d, |p, row| {
            let mut sj = vec![0.0; r * d];
            c.stat_jac(&rows[p * d..(p + 1) * d], &mut sj);
            transpose_apply(&sj, &a, d, row);
        });
    }
    if c.has_kernel() {
        if n > PAIRWISE_CAP {
            return Err(Error::Capacity(format!("pairwise mean-field term with {n} particles exceeds {PAIRWISE_CAP}")));
        }
        parallel::fill_rows(&mut out, d, |p, row| {
            let xs = &rows[p * d..(p + 1) * d];
            let mut kj = vec![0.0; m * d];
            let mut acc = vec![0.0; d];
            for j in 0..n {
                c.kernel_jac_xt(t, &rows[j * d..(j + 1) * d], xs, &mut kj);
                transpose_apply(&kj, &weights[j * m..(j + 1) * m], d, &mut acc);
            }
            for (o, a) in row.iter_mut().zip(&acc) {
                *o += a / n as f64;
            }
        });
    }
    Ok(out)
}

/// Full gradient rows `∂_x H(θ, p, q) + Ẽ[∂_μ H(θ̃, p̃, q̃)(θ)]` over `(y, z, u)`, `N x (n + nl + k)`.
pub fn hamiltonian_gradients(spec: &ProblemSpec, t: f64, rows: &[f64], p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    let dw = spec.x_width();
    let n_rows = rows.len() / dw;
    let ones = vec![1.0; n_rows];
    let parts: [(&dyn MeanFieldFn, &[f64]); 3] = [(spec.f.as_ref(), p), (spec.g.as_ref(), q), (spec.h.as_ref(), &ones)];
    let mut out = vec![0.0; n_rows * dw];
    for (c, w) in parts {
        let m = c.out_dim();
        let stats = statistics(c, rows);
        let mut local = vec![0.0; n_rows * dw];
        parallel::fill_rows(&mut local, dw, |i, row| {
            let mut jac = vec![0.0; m * dw];
            jacobian_x(c, t, &rows[i * dw..(i + 1) * dw], &stats, rows, &mut jac);
            transpose_apply(&jac, &w[i * m..(i + 1) * m], dw, row);
        });
        let dual = dual_mean_term(c, t, rows, w)?;
        for ((o, a), b) in out.iter_mut().zip(&local).zip(&dual) {
            *o += a + b;
        }
    }
    Ok(out)
}

/// `p_0 = ∂_yΦ(y_0, μ) + Ẽ[∂_{μ_y}Φ(ỹ_0, μ)(y_0)]` for every particle.
pub fn adjoint_initial(phi: &dyn MeanFieldFn, y0: &[f64]) -> Result<Vec<f64>> {
    let n = phi.in_dim();
    let rows = y0.len() / n;
    if rows == 0 {
        return Err(invalid("empty law for the adjoint initial value"));
    }
    let stats = statistics(phi, y0);
    let mut out = vec![0.0; rows * n];
    parallel::fill_rows(&mut out, n, |p, row| {
        jacobian_x(phi, 0.0, &y0[p * n..(p + 1) * n], &stats, y0, row);
    });
    let dual = dual_mean_term(phi, 0.0, y0, &vec![1.0; rows])?;
    for (o, d) in out.iter_mut().zip(&dual) {
        *o += d;
    }
    Ok(out)
}

/// Map grid-indexed fields `i -> n - i` (an involution).
pub fn reverse_grid_fields(fields: &[Vec<f64>]) -> Vec<Vec<f64>> {
    fields.iter().rev().cloned().collect()
}

/// Map step-indexed fields `i -> n - 1 - i` on the first `n` entries; a trailing
/// grid slot (index `n`) is kept in place. An involution.
pub fn reverse_step_fields(fields: &[Vec<f64>], n_steps: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = fields[..n_steps].iter().rev().cloned().collect();
    out.extend(fields[n_steps..].iter().cloned());
    out
}

/// Time reversal of paths and of `(grid fields, step fields)` in one call.
pub fn reverse_time_transform(
    paths: &DriverPaths,
    grid_fields: &[Vec<f64>],
    step_fields: &[Vec<f64>],
) -> Result<(DriverPaths, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = paths.n_steps();
    if grid_fields.len() != n + 1 || step_fields.len() < n {
        return Err(invalid("field arrays do not match the time grid"));
    }
    Ok((paths.reversed(), reverse_grid_fields(grid_fields), reverse_step_fields(step_fields, n)))
}

/// Adjoint fields on one ensemble.
///
/// The discrete adjoint carries a multiplier `M_i` per step. `p[i] = E[M_i | F_{t_i}]`
/// is the adjoint at grid point `i` and `p_ahead[i] = E[M_i | F_{t_{i+1}}]` is the
/// same multiplier seen one step later; `q[i] = E[M_i ΔB_iᵀ | F_{t_{i+1}}] / dt`.
/// The control gradient of step `i` pairs `θ_{i+1}` with `(p_ahead[i], q[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution {
    pub p: Vec<Vec<f64>>,
    pub p_ahead: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub diagnostics: SolveDiagnostics,
}

/// The reversed adjoint equation as a BDSDE model.
///
/// Engine step `s` is original step `j = n - 1 - s`. The engine's `y_{s+1}` is
/// `p_ahead[j - 1]` (the datum `p_0` when `j = 0`) and its `z_{s+1}` is `q[j - 1]`.
/// Coefficients are `F = ∂_y H + Ẽ[∂_{μ_y} H]` and `G` likewise in `z`, taken at
/// `θ_j` with those multipliers; they vanish at `j = 0` because `θ_0` never
/// enters the state scheme. This makes the recursion the exact transpose of the
/// linearized state scheme, so one explicit sweep solves it.
struct AdjointModel<'a> {
    spec: &'a ProblemSpec,
    /// `θ_{i+1}` rows per original step `i`.
    theta: Vec<Vec<f64>>,
    times: Vec<f64>,
    p0: Vec<f64>,
}

impl AdjointModel<'_> {
    fn n_steps(&self) -> usize {
        self.theta.len()
    }

    /// `F` and `G` at grid point `j >= 1` for multipliers `(p, q)`.
    fn drift(&self, j: usize, p: &[f64], q: &[f64], f: &mut [f64], g: &mut [f64]) -> Result<()> {
        let dims = self.spec.dims;
        let (n, nz) = (dims.n, dims.z_width());
        let dw = self.spec.x_width();
        let grad = hamiltonian_gradients(self.spec, self.times[j - 1], &self.theta[j - 1], p, q)?;
        for (r, row) in grad.chunks(dw).enumerate() {
            f[r * n..(r + 1) * n].copy_from_slice(&row[..n]);
            g[r * nz..(r + 1) * nz].copy_from_slice(&row[n..n + nz]);
        }
        Ok(())
    }
}

impl BdsdeModel for AdjointModel<'_> {
    fn dims(&self) -> Dims {
        let d = self.spec.dims;
        Dims { n: d.n, l: d.d, d: d.l }
    }

    // Law terms read the multipliers of the already computed point.
    fn mean_field(&self) -> bool {
        false
    }

    fn z_point(&self) -> ZPoint {
        ZPoint::Next
    }

    fn estimator(&self) -> Estimator {
        Estimator::Transposed
    }

    fn terminal(&self, _paths: &DriverPaths, out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.p0);
        Ok(())
    }

    fn coefficients(&self, v: &StepView, f: &mut [f64], g: &mut [f64]) -> Result<()> {
        let j = self.n_steps() - 1 - v.step;
        if j == 0 {
            f.fill(0.0);
            g.fill(0.0);
            return Ok(());
        }
        self.drift(j, v.y, v.z, f, g)
    }
}

/// `θ_{i+1} = (y_{i+1}, z_{i+1}, u_i)` rows for every step `i`.
pub fn theta_rows(spec: &ProblemSpec, state: &EnsembleSolution, u: &Control) -> Vec<Vec<f64>> {
    let (n, nz, k) = (spec.dims.n, spec.dims.z_width(), spec.k);
    (0..state.n_steps()).map(|i| stack_rows(&state.y[i + 1], &state.z[i + 1], &u.values[i], n, nz, k)).collect()
}

fn adjoint_model<'a>(spec: &'a ProblemSpec, state: &EnsembleSolution, u: &Control, paths: &DriverPaths) -> Result<AdjointModel<'a>> {
    if state.n_particles != paths.n_particles || state.n_steps() != paths.n_steps() {
        return Err(invalid("state solution and paths describe different ensembles"));
    }
    let p0 = adjoint_initial(spec.phi.as_ref(), &state.y[0])?;
    let times = (0..paths.n_steps()).map(|i| paths.grid.t(i + 1)).collect();
    Ok(AdjointModel { spec, theta: theta_rows(spec, state, u), times, p0 })
}

fn unreverse(model: &AdjointModel, sol: EnsembleSolution, dt: f64) -> Result<AdjointSolution> {
    let n = sol.n_steps();
    let ahead = reverse_grid_fields(&sol.y);
    let q = reverse_step_fields(&sol.z, n);
    let width = model.spec.dims.n;
    let gw = model.spec.dims.z_width();
    let mut p = vec![ahead[0].clone()];
    for j in 1..=n {
        // p_j = p_ahead[j - 1] + F(θ_j, p_ahead[j - 1], q[j - 1]) dt.
        let rows = ahead[j].len() / width;
        let mut f = vec![0.0; rows * width];
        let mut g = vec![0.0; rows * gw];
        model.drift(j, &ahead[j], &q[j - 1], &mut f, &mut g)?;
        p.push(ahead[j].iter().zip(&f).map(|(a, b)| a + b * dt).collect());
    }
    Ok(AdjointSolution { p, p_ahead: ahead[1..].to_vec(), q, diagnostics: sol.diagnostics })
}

/// Solve the adjoint equation for a solved state by time reversal.
pub fn solve_adjoint(
    spec: &ProblemSpec,
    state: &EnsembleSolution,
    u: &Control,
    paths: &DriverPaths,
    cfg: &SolveConfig,
) -> Result<AdjointSolution> {
    let model = adjoint_model(spec, state, u, paths)?;
    let sol = bdsde::solve_model(&model, &paths.reversed(), cfg)?;
    unreverse(&model, sol, paths.grid.dt)
}

/// Exact adjoint on a full Bernoulli tree (node recursion on the reversed tree).
pub fn solve_adjoint_on_tree(spec: &ProblemSpec, state: &EnsembleSolution, u: &Control, paths: &DriverPaths) -> Result<AdjointSolution> {
    let model = adjoint_model(spec, state, u, paths)?;
    let sol = bdsde::solve_model_on_tree(&model, &paths.reversed(), 1e-14)?;
    unreverse(&model, sol, paths.grid.dt)
}

/// Residual norms of the integrated adjoint identity, checked on the reversed
/// system and returned in original grid order.
pub fn adjoint_residual(
    spec: &ProblemSpec,
    state: &EnsembleSolution,
    u: &Control,
    adj: &AdjointSolution,
    paths: &DriverPaths,
) -> Result<Vec<f64>> {
    let model = adjoint_model(spec, state, u, paths)?;
    let n = paths.n_steps();
    if adj.p.len() != n + 1 || adj.p_ahead.len() != n {
        return Err(invalid("adjoint fields do not match the time grid"));
    }
    let mut ahead = vec![adj.p[0].clone()];
    ahead.extend(adj.p_ahead.iter().cloned());
    let rev = EnsembleSolution {
        dims: model.dims(),
        n_particles: paths.n_particles,
        y: reverse_grid_fields(&ahead),
        z: reverse_step_fields(&adj.q, n),
        diagnostics: SolveDiagnostics::default(),
    };
    let mut r = bdsde::residual_check_model(&model, &rev, &paths.reversed())?;
    r.reverse();
    Ok(r)
}
