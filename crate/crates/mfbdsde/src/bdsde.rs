//! Backward solver for mean-field BDSDEs
//! `-dy = f dt + g d←B - z dW`, `y_T = ξ`, on a particle ensemble.
//!
//! One backward sweep uses
//! `z_i = (P_i[(y_{i+1} + f_{i+1} dt) ΔW_iᵀ] + P_i[g_{i+1} ΔW_iᵀ] ΔB_i) / dt` and
//! `y_i = P_i[y_{i+1} + f_{i+1} dt] + P_i[g_{i+1}] ΔB_i`, where `P_i` is the
//! regression operator of [`crate::regression`]. Sweeps are wrapped in a
//! Picard loop on the ensemble law, which is frozen from the previous sweep.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::drivers::{DriverMode, DriverPaths};
use crate::error::{invalid, Error, Result};
use crate::law::identity_coupling_distance;
use crate::parallel;
use crate::regression::{Projector, RegressionConfig};

/// `n`: state dimension, `l`: dimension of W, `d`: dimension of B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub l: usize,
    pub d: usize,
}

impl Dims {
    pub fn z_width(&self) -> usize {
        self.n * self.l
    }
    pub fn g_width(&self) -> usize {
        self.n * self.d
    }
}

/// Which `z` the coefficients of step `i` see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZPoint {
    /// `z_{i+1}` from the current sweep (`z_n = 0`).
    Next,
    /// `z_i` from the previous sweep; resolved by the Picard loop.
    Current,
}

/// Regression form of one backward step. Both forms estimate the same
/// conditional expectations and agree exactly under exact conditioning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// `y = P v + P[g] ΔB`, `z dt = P[(v - Pv) ΔWᵀ] + P[(g - Pg) ΔWᵀ] ΔB`.
    Primal,
    /// The transpose of [`Estimator::Primal`] under the empirical inner product:
    /// `y = P v + (I - P)(P[g] ΔB)`, `z dt = P[v ΔWᵀ] + (I - P)(P[g ΔWᵀ] ΔB)`.
    /// Solving a reversed adjoint with it gives the exact gradient of the
    /// discrete cost.
    Transposed,
}

/// Ensemble data handed to the coefficients of step `i`.
pub struct StepView<'a> {
    pub step: usize,
    /// `t_{i+1}`.
    pub t: f64,
    /// `y_{i+1}` rows (`N x n`).
    pub y: &'a [f64],
    /// `z` rows (`N x nl`) at the point selected by [`ZPoint`].
    pub z: &'a [f64],
    /// Frozen law: `y` rows of the previous sweep at the same grid point.
    pub law_y: &'a [f64],
    /// Frozen law: `z` rows of the previous sweep at the same point as `z`.
    pub law_z: &'a [f64],
    pub paths: &'a DriverPaths,
}

/// Coefficients of a (possibly mean-field) BDSDE on an ensemble.
pub trait BdsdeModel: Sync {
    fn dims(&self) -> Dims;
    /// Whether coefficients read the frozen law (requires Picard iteration).
    fn mean_field(&self) -> bool;
    fn z_point(&self) -> ZPoint {
        ZPoint::Next
    }
    fn estimator(&self) -> Estimator {
        Estimator::Primal
    }
    /// Terminal values `ξ` (`N x n`).
    fn terminal(&self, paths: &DriverPaths, out: &mut [f64]) -> Result<()>;
    /// `f` (`N x n`) and `g` (`N x nd`, row-major `n x d` per particle) for step `view.step`.
    fn coefficients(&self, view: &StepView, f: &mut [f64], g: &mut [f64]) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PicardConfig {
    /// Relative tolerance; the loop stops when the displacement is below `tol * (1 + scale)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig { tol: 1e-8, max_iter: 50 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveConfig {
    pub regression: RegressionConfig,
    pub picard: PicardConfig,
}

impl SolveConfig {
    pub fn tree() -> Self {
        SolveConfig { regression: RegressionConfig::tree(), picard: PicardConfig { tol: 1e-14, max_iter: 200 } }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    /// Law displacement between consecutive sweeps: max over grid points of the
    /// identity-coupling RMS distance of the `(y, z)` rows, an upper bound for W2.
    pub picard_displacements: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `max_i RMS(y_i)`, the scale entering the stopping rule.
    pub scale: f64,
    /// Set when `N = 1`: mean-field terms collapse to the single particle.
    pub degenerate_ensemble: bool,
}

/// Time-major ensemble fields of a solved BDSDE.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSolution {
    pub dims: Dims,
    pub n_particles: usize,
    /// `y[i]` holds `N x n` rows at grid point `i`, `i = 0..=n_steps`.
    pub y: Vec<Vec<f64>>,
    /// `z[i]` holds `N x nl` rows for step `i`; `z[n_steps]` is zero.
    pub z: Vec<Vec<f64>>,
    pub diagnostics: SolveDiagnostics,
}

impl EnsembleSolution {
    pub fn n_steps(&self) -> usize {
        self.y.len() - 1
    }

    pub fn y_row(&self, i: usize, p: usize) -> &[f64] {
        &self.y[i][p * self.dims.n..(p + 1) * self.dims.n]
    }

    pub fn z_row(&self, i: usize, p: usize) -> &[f64] {
        let w = self.dims.z_width();
        &self.z[i][p * w..(p + 1) * w]
    }

    /// Write `(particle, step, field, coordinate, value)` rows; `yname`/`zname`
    /// label the two fields (e.g. `y`/`z` or `p`/`q`).
    pub fn write_csv<W: std::io::Write>(&self, out: W, yname: &str, zname: &str) -> Result<()> {
        let io = |e: csv::Error| Error::Io { path: "<solution csv>".into(), message: e.to_string() };
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["particle", "step", "field", "coordinate", "value"]).map_err(io)?;
        for p in 0..self.n_particles {
            for i in 0..=self.n_steps() {
                for (c, v) in self.y_row(i, p).iter().enumerate() {
                    wtr.write_record(&[p.to_string(), i.to_string(), yname.into(), c.to_string(), format!("{v:e}")])
                        .map_err(io)?;
                }
            }
            for i in 0..self.n_steps() {
                for (c, v) in self.z_row(i, p).iter().enumerate() {
                    wtr.write_record(&[p.to_string(), i.to_string(), zname.into(), c.to_string(), format!("{v:e}")])
                        .map_err(io)?;
                }
            }
        }
        wtr.flush().map_err(|e| Error::Io { path: "<solution csv>".into(), message: e.to_string() })
    }
}

fn check_shapes<M: BdsdeModel + ?Sized>(model: &M, paths: &DriverPaths) -> Result<Dims> {
    let dims = model.dims();
    if dims.n == 0 {
        return Err(invalid("state dimension must be positive"));
    }
    if paths.w_dim != dims.l || paths.b_dim != dims.d {
        return Err(invalid(format!(
            "driver dimensions ({}, {}) do not match the model ({}, {})",
            paths.w_dim, paths.b_dim, dims.l, dims.d
        )));
    }
    Ok(dims)
}

fn check_finite(v: &[f64], what: &str, step: usize) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("non-finite {what} at step {step}")));
    }
    Ok(())
}

type Fields = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn initial_guess(dims: Dims, n_steps: usize, xi: &[f64], rows: usize) -> Fields {
    (vec![xi.to_vec(); n_steps + 1], vec![vec![0.0; rows * dims.z_width()]; n_steps + 1])
}

/// Evaluate the coefficients of step `i` given the current sweep and the frozen fields.
fn eval_step<M: BdsdeModel + ?Sized>(
    model: &M,
    paths: &DriverPaths,
    i: usize,
    y: &[Vec<f64>],
    z: &[Vec<f64>],
    frozen: &Fields,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dims = model.dims();
    let rows = paths.n_particles;
    let zsel = match model.z_point() {
        ZPoint::Next => (&z[i + 1], &frozen.1[i + 1]),
        ZPoint::Current => (&frozen.1[i], &frozen.1[i]),
    };
    let view = StepView {
        step: i,
        t: paths.grid.t(i + 1),
        y: &y[i + 1],
        z: zsel.0,
        law_y: &frozen.0[i + 1],
        law_z: zsel.1,
        paths,
    };
    let mut f = vec![0.0; rows * dims.n];
    let mut g = vec![0.0; rows * dims.g_width()];
    model.coefficients(&view, &mut f, &mut g)?;
    check_finite(&f, "drift", i)?;
    check_finite(&g, "backward diffusion", i)?;
    Ok((f, g))
}

fn sweep<M: BdsdeModel + ?Sized>(
    model: &M,
    paths: &DriverPaths,
    projectors: &[Projector],
    xi: &[f64],
    frozen: &Fields,
) -> Result<Fields> {
    let dims = model.dims();
    let (n, l, d) = (dims.n, dims.l, dims.d);
    let rows = paths.n_particles;
    let steps = paths.n_steps();
    let dt = paths.grid.dt;
    let mut y = vec![Vec::new(); steps + 1];
    let mut z = vec![vec![0.0; rows * n * l]; steps + 1];
    y[steps] = xi.to_vec();
    if model.estimator() == Estimator::Transposed {
        return sweep_transposed(model, paths, projectors, xi, frozen);
    }
    // First pass per particle: [y + f dt (n) | g (nd)]. The second pass projects
    // the centered products [(v - Pv) ΔWᵀ (nl) | (g - Pg) ΔWᵀ (ndl)] with
    // v = y + f dt; centering leaves the conditional expectation unchanged and
    // removes the regression noise of in-span targets. Keeping f dt in v makes
    // the integrated identity exact on binary trees.
    let w1 = n + n * d;
    let w2 = n * l + n * d * l;
    for i in (0..steps).rev() {
        let (f, g) = eval_step(model, paths, i, &y, &z, frozen)?;
        let yn = &y[i + 1];
        let mut first = vec![0.0; rows * w1];
        parallel::fill_rows(&mut first, w1, |p, row| {
            for r in 0..n {
                row[r] = yn[p * n + r] + f[p * n + r] * dt;
            }
            row[n..n + n * d].copy_from_slice(&g[p * n * d..(p + 1) * n * d]);
        });
        let mut proj1 = projectors[i].project(&first, w1)?;
        let mut second = vec![0.0; rows * w2];
        parallel::fill_rows(&mut second, w2, |p, row| {
            let dw = paths.w_increment(p, i);
            let pr = &proj1[p * w1..(p + 1) * w1];
            let (c, e) = row.split_at_mut(n * l);
            for r in 0..n {
                let yc = yn[p * n + r] + f[p * n + r] * dt - pr[r];
                for k in 0..l {
                    c[r * l + k] = yc * dw[k];
                }
                for j in 0..d {
                    let gc = g[(p * n + r) * d + j] - pr[n + r * d + j];
                    for k in 0..l {
                        e[(r * d + j) * l + k] = gc * dw[k];
                    }
                }
            }
        });
        let mut proj2 = projectors[i].project(&second, w2)?;
        if projectors[i].refines() {
            proj1 = refine_step(&projectors[i], paths, i, yn, &f, &g, &mut proj2, dims, dt)?;
        }
        let mut yi = vec![0.0; rows * n];
        let mut zi = vec![0.0; rows * n * l];
        for p in 0..rows {
            let db = paths.b_increment(p, i);
            let (a, rest) = proj1[p * w1..(p + 1) * w1].split_at(n);
            let b = &rest[..n * d];
            let (c, e) = proj2[p * w2..(p + 1) * w2].split_at(n * l);
            for r in 0..n {
                yi[p * n + r] = a[r] + (0..d).map(|j| b[r * d + j] * db[j]).sum::<f64>();
                for k in 0..l {
                    let cross: f64 = (0..d).map(|j| e[(r * d + j) * l + k] * db[j]).sum();
                    zi[(p * n + r) * l + k] = (c[r * l + k] + cross) / dt;
                }
            }
        }
        check_finite(&yi, "y", i)?;
        check_finite(&zi, "z", i)?;
        y[i] = yi;
        z[i] = zi;
    }
    Ok((y, z))
}

/// One Gauss-Seidel pass of the joint regression of `[v | g]` on the basis and
/// the basis times `ΔW`, starting from the single-pass estimates. With `c dt`
/// the `ΔW` coefficients in `proj2`: `a' = P[v - c ΔW]` and
/// `c' dt = c dt + P[(v - a' - c ΔW) ΔWᵀ]`, likewise for `g`. Returns the new
/// first-pass projections and updates `proj2` in place.
#[allow(clippy::too_many_arguments)]
fn refine_step(
    projector: &Projector,
    paths: &DriverPaths,
    i: usize,
    yn: &[f64],
    f: &[f64],
    g: &[f64],
    proj2: &mut [f64],
    dims: Dims,
    dt: f64,
) -> Result<Vec<f64>> {
    let (n, l, d) = (dims.n, dims.l, dims.d);
    let rows = paths.n_particles;
    let (w1, w2) = (n + n * d, n * l + n * d * l);
    // Residual targets with the current ΔW components removed.
    let detrended = |p: usize, out: &mut [f64]| {
        let dw = paths.w_increment(p, i);
        let c = &proj2[p * w2..(p + 1) * w2];
        for r in 0..n {
            let cw: f64 = (0..l).map(|k| c[r * l + k] * dw[k]).sum::<f64>() / dt;
            out[r] = yn[p * n + r] + f[p * n + r] * dt - cw;
            for j in 0..d {
                let ew: f64 = (0..l).map(|k| c[n * l + (r * d + j) * l + k] * dw[k]).sum::<f64>() / dt;
                out[n + r * d + j] = g[(p * n + r) * d + j] - ew;
            }
        }
    };
    let mut third = vec![0.0; rows * w1];
    parallel::fill_rows(&mut third, w1, |p, row| detrended(p, row));
    let proj3 = projector.project(&third, w1)?;
    let mut fourth = vec![0.0; rows * w2];
    parallel::fill_rows(&mut fourth, w2, |p, row| {
        let dw = paths.w_increment(p, i);
        let (t, a) = (&third[p * w1..(p + 1) * w1], &proj3[p * w1..(p + 1) * w1]);
        for r in 0..n {
            for k in 0..l {
                row[r * l + k] = (t[r] - a[r]) * dw[k];
            }
            for j in 0..d {
                let m = n + r * d + j;
                for k in 0..l {
                    row[n * l + (r * d + j) * l + k] = (t[m] - a[m]) * dw[k];
                }
            }
        }
    });
    let proj4 = projector.project(&fourth, w2)?;
    for (c, delta) in proj2.iter_mut().zip(&proj4) {
        *c += delta;
    }
    Ok(proj3)
}

/// Sweep with [`Estimator::Transposed`].
fn sweep_transposed<M: BdsdeModel + ?Sized>(
    model: &M,
    paths: &DriverPaths,
    projectors: &[Projector],
    xi: &[f64],
    frozen: &Fields,
) -> Result<Fields> {
    let dims = model.dims();
    let (n, l, d) = (dims.n, dims.l, dims.d);
    let rows = paths.n_particles;
    let steps = paths.n_steps();
    let dt = paths.grid.dt;
    let mut y = vec![Vec::new(); steps + 1];
    let mut z = vec![vec![0.0; rows * n * l]; steps + 1];
    y[steps] = xi.to_vec();
    // First pass: [v (n) | g (nd) | v ΔWᵀ (nl) | g ΔWᵀ (ndl)].
    let w1 = n + n * d + n * l + n * d * l;
    let w2 = n + n * l;
    for i in (0..steps).rev() {
        let (f, g) = eval_step(model, paths, i, &y, &z, frozen)?;
        let yn = &y[i + 1];
        let mut first = vec![0.0; rows * w1];
        parallel::fill_rows(&mut first, w1, |p, row| {
            let dw = paths.w_increment(p, i);
            let (v, rest) = row.split_at_mut(n);
            let (gg, rest) = rest.split_at_mut(n * d);
            let (vw, gw) = rest.split_at_mut(n * l);
            for r in 0..n {
                v[r] = yn[p * n + r] + f[p * n + r] * dt;
                for k in 0..l {
                    vw[r * l + k] = v[r] * dw[k];
                }
                for j in 0..d {
                    let gv = g[(p * n + r) * d + j];
                    gg[r * d + j] = gv;
                    for k in 0..l {
                        gw[(r * d + j) * l + k] = gv * dw[k];
                    }
                }
            }
        });
        let proj1 = projectors[i].project(&first, w1)?;
        let mut second = vec![0.0; rows * w2];
        parallel::fill_rows(&mut second, w2, |p, row| {
            let db = paths.b_increment(p, i);
            let pr = &proj1[p * w1..(p + 1) * w1];
            let pg = &pr[n..n + n * d];
            let pgw = &pr[n + n * d + n * l..];
            for r in 0..n {
                row[r] = (0..d).map(|j| pg[r * d + j] * db[j]).sum();
                for k in 0..l {
                    row[n + r * l + k] = (0..d).map(|j| pgw[(r * d + j) * l + k] * db[j]).sum();
                }
            }
        });
        let proj2 = projectors[i].project(&second, w2)?;
        let mut yi = vec![0.0; rows * n];
        let mut zi = vec![0.0; rows * n * l];
        for p in 0..rows {
            let pr = &proj1[p * w1..(p + 1) * w1];
            let (sec, psec) = (&second[p * w2..(p + 1) * w2], &proj2[p * w2..(p + 1) * w2]);
            for r in 0..n {
                yi[p * n + r] = pr[r] + sec[r] - psec[r];
                for k in 0..l {
                    let c = n + r * l + k;
                    zi[(p * n + r) * l + k] = (pr[n + n * d + r * l + k] + sec[c] - psec[c]) / dt;
                }
            }
        }
        check_finite(&yi, "y", i)?;
        check_finite(&zi, "z", i)?;
        y[i] = yi;
        z[i] = zi;
    }
    Ok((y, z))
}

fn field_scale(y: &[Vec<f64>], n: usize) -> f64 {
    y.iter().map(|v| identity_coupling_distance(v, &vec![0.0; v.len()], n)).fold(0.0, f64::max)
}

fn displacement(a: &Fields, b: &Fields, dims: Dims) -> f64 {
    let w = dims.n + dims.z_width();
    let mut worst: f64 = 0.0;
    for i in 0..a.0.len() {
        let rows = a.0[i].len() / dims.n;
        let mut sa = Vec::with_capacity(rows * w);
        let mut sb = Vec::with_capacity(rows * w);
        for p in 0..rows {
            sa.extend_from_slice(&a.0[i][p * dims.n..(p + 1) * dims.n]);
            sa.extend_from_slice(&a.1[i][p * dims.z_width()..(p + 1) * dims.z_width()]);
            sb.extend_from_slice(&b.0[i][p * dims.n..(p + 1) * dims.n]);
            sb.extend_from_slice(&b.1[i][p * dims.z_width()..(p + 1) * dims.z_width()]);
        }
        worst = worst.max(identity_coupling_distance(&sa, &sb, w));
    }
    worst
}

fn picard<M, S>(model: &M, paths: &DriverPaths, picard: &PicardConfig, mut sweep_once: S) -> Result<EnsembleSolution>
where
    M: BdsdeModel + ?Sized,
    S: FnMut(&[f64], &Fields) -> Result<Fields>,
{
    let dims = check_shapes(model, paths)?;
    let rows = paths.n_particles;
    let steps = paths.n_steps();
    let mut xi = vec![0.0; rows * dims.n];
    model.terminal(paths, &mut xi)?;
    check_finite(&xi, "terminal value", steps)?;
    let single = !model.mean_field() && model.z_point() == ZPoint::Next;
    let mut current = initial_guess(dims, steps, &xi, rows);
    let mut diag = SolveDiagnostics { degenerate_ensemble: rows == 1, ..Default::default() };
    for it in 0..picard.max_iter.max(1) {
        let next = sweep_once(&xi, &current)?;
        diag.iterations = it + 1;
        if single {
            current = next;
            diag.converged = true;
            break;
        }
        let disp = displacement(&next, &current, dims);
        diag.picard_displacements.push(disp);
        current = next;
        diag.scale = field_scale(&current.0, dims.n);
        if disp <= picard.tol * (1.0 + diag.scale) {
            diag.converged = true;
            break;
        }
    }
    diag.scale = field_scale(&current.0, dims.n);
    Ok(EnsembleSolution { dims, n_particles: rows, y: current.0, z: current.1, diagnostics: diag })
}

/// Solve a BDSDE model on the ensemble with the regression scheme.
pub fn solve_model<M: BdsdeModel + ?Sized>(model: &M, paths: &DriverPaths, cfg: &SolveConfig) -> Result<EnsembleSolution> {
    check_shapes(model, paths)?;
    let projectors = build_projectors(paths, &cfg.regression)?;
    picard(model, paths, &cfg.picard, |xi, frozen| sweep(model, paths, &projectors, xi, frozen))
}

/// One projector per step, for callers that solve many models on the same paths.
pub fn build_projectors(paths: &DriverPaths, cfg: &RegressionConfig) -> Result<Vec<Projector>> {
    (0..paths.n_steps()).map(|i| Projector::new(paths, i, cfg)).collect()
}

/// [`solve_model`] with projectors from [`build_projectors`] on the same paths.
pub fn solve_model_with<M: BdsdeModel + ?Sized>(
    model: &M,
    paths: &DriverPaths,
    projectors: &[Projector],
    picard_cfg: &PicardConfig,
) -> Result<EnsembleSolution> {
    check_shapes(model, paths)?;
    if projectors.len() != paths.n_steps() || projectors.iter().any(|p| p.rows() != paths.n_particles) {
        return Err(invalid("projectors were built for different paths"));
    }
    picard(model, paths, picard_cfg, |xi, frozen| sweep(model, paths, projectors, xi, frozen))
}

type NodeKey = Vec<bool>;

fn node_key(paths: &DriverPaths, p: usize, step: usize) -> NodeKey {
    let mut key = Vec::new();
    for s in 0..step {
        key.extend(paths.w_increment(p, s).iter().map(|v| *v > 0.0));
    }
    for s in step..paths.n_steps() {
        key.extend(paths.b_increment(p, s).iter().map(|v| *v > 0.0));
    }
    key
}

fn tree_sweep<M: BdsdeModel + ?Sized>(model: &M, paths: &DriverPaths, xi: &[f64], frozen: &Fields) -> Result<Fields> {
    let dims = model.dims();
    let (n, l, d) = (dims.n, dims.l, dims.d);
    let rows = paths.n_particles;
    let steps = paths.n_steps();
    let dt = paths.grid.dt;
    let mut y = vec![Vec::new(); steps + 1];
    let mut z = vec![vec![0.0; rows * n * l]; steps + 1];
    y[steps] = xi.to_vec();
    for i in (0..steps).rev() {
        let (f, g) = eval_step(model, paths, i, &y, &z, frozen)?;
        // A node at step i is split by the 2^l sign choices of ΔW_i; each child
        // carries weight 2^-l and is represented by its smallest particle id.
        let mut child_rep: HashMap<NodeKey, usize> = HashMap::new();
        for p in 0..rows {
            let mut key = node_key(paths, p, i);
            key.extend(paths.w_increment(p, i).iter().map(|v| *v > 0.0));
            child_rep.entry(key).or_insert(p);
        }
        let mut node_children: HashMap<NodeKey, Vec<usize>> = HashMap::new();
        let mut reps: Vec<usize> = child_rep.values().copied().collect();
        reps.sort_unstable();
        for &c in &reps {
            node_children.entry(node_key(paths, c, i)).or_default().push(c);
        }
        let weight = 0.5f64.powi(l as i32);
        let mut yi = vec![0.0; rows * n];
        let mut zi = vec![0.0; rows * n * l];
        let mut cache: HashMap<NodeKey, (Vec<f64>, Vec<f64>)> = HashMap::new();
        for p in 0..rows {
            let key = node_key(paths, p, i);
            if !cache.contains_key(&key) {
                let children = &node_children[&key];
                if children.len() != 1 << l {
                    return Err(invalid("tree ensemble is missing continuations"));
                }
                let db = paths.b_increment(p, i);
                let mut ynode = vec![0.0; n];
                let mut znode = vec![0.0; n * l];
                for &c in children {
                    let dw = paths.w_increment(c, i);
                    for r in 0..n {
                        let gdb: f64 = (0..d).map(|j| g[(c * n + r) * d + j] * db[j]).sum();
                        let base = y[i + 1][c * n + r];
                        ynode[r] += weight * (base + f[c * n + r] * dt + gdb);
                        for k in 0..l {
                            znode[r * l + k] += weight * (base + f[c * n + r] * dt + gdb) * dw[k] / dt;
                        }
                    }
                }
                cache.insert(key.clone(), (ynode, znode));
            }
            let (yn, zn) = &cache[&key];
            yi[p * n..(p + 1) * n].copy_from_slice(yn);
            zi[p * n * l..(p + 1) * n * l].copy_from_slice(zn);
        }
        y[i] = yi;
        z[i] = zi;
    }
    Ok((y, z))
}

/// Exact backward induction on a fully enumerated Bernoulli tree.
pub fn solve_model_on_tree<M: BdsdeModel + ?Sized>(model: &M, paths: &DriverPaths, tol: f64) -> Result<EnsembleSolution> {
    if paths.mode != DriverMode::BernoulliTree || !paths.is_full_tree() {
        return Err(invalid("exact tree solve needs a fully enumerated Bernoulli tree"));
    }
    let cfg = PicardConfig { tol, max_iter: 500 };
    picard(model, paths, &cfg, |xi, frozen| tree_sweep(model, paths, xi, frozen))
}

/// Root-mean-square of the discrete integrated identity
/// `y_i - ξ - Σ_{j≥i} (f_j dt + g_j ΔB_j - z_j ΔW_j)` at every grid point.
pub fn residual_check_model<M: BdsdeModel + ?Sized>(
    model: &M,
    sol: &EnsembleSolution,
    paths: &DriverPaths,
) -> Result<Vec<f64>> {
    let dims = check_shapes(model, paths)?;
    let (n, l, d) = (dims.n, dims.l, dims.d);
    let rows = paths.n_particles;
    let steps = paths.n_steps();
    let dt = paths.grid.dt;
    let mut xi = vec![0.0; rows * n];
    model.terminal(paths, &mut xi)?;
    let frozen: Fields = (sol.y.clone(), sol.z.clone());
    let mut acc = xi.clone();
    let mut out = vec![0.0; steps + 1];
    out[steps] = identity_coupling_distance(&sol.y[steps], &acc, n);
    for i in (0..steps).rev() {
        let (f, g) = eval_step(model, paths, i, &sol.y, &sol.z, &frozen)?;
        for p in 0..rows {
            let dw = paths.w_increment(p, i);
            let db = paths.b_increment(p, i);
            for r in 0..n {
                let gdb: f64 = (0..d).map(|j| g[(p * n + r) * d + j] * db[j]).sum();
                let zdw: f64 = (0..l).map(|k| sol.z[i][(p * n + r) * l + k] * dw[k]).sum();
                acc[p * n + r] += f[p * n + r] * dt + gdb - zdw;
            }
        }
        out[i] = identity_coupling_distance(&sol.y[i], &acc, n);
    }
    Ok(out)
}

/// Mean with its standard error and the closed-form target it is compared to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub expected: f64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64], expected: f64) -> Self {
        let n = samples.len() as f64;
        let mean = parallel::sum_by(samples.len(), |i| samples[i]) / n;
        let var = parallel::sum_by(samples.len(), |i| (samples[i] - mean).powi(2)) / (n - 1.0).max(1.0);
        Estimate { mean, std_error: (var / n).sqrt(), expected }
    }

    /// `|mean - expected| <= k` standard errors.
    pub fn within(&self, k: f64) -> bool {
        (self.mean - self.expected).abs() <= k * self.std_error
    }
}

/// `E[α_T² - α_0²]` for `α_t = θ W_t - γ (B_T - B_t)` (scalar drivers), whose
/// closed form `(θ² - γ²) T` carries the minus sign of the backward correction.
pub fn ito_square_probe(paths: &DriverPaths, theta: f64, gamma: f64) -> Estimate {
    let n = paths.n_steps();
    let w = paths.w_values();
    let tails = paths.b_tails();
    let s: Vec<f64> = (0..paths.n_particles)
        .map(|p| {
            let a_t = theta * w[p * (n + 1) + n];
            let a_0 = -gamma * tails[p * (n + 1)];
            a_t * a_t - a_0 * a_0
        })
        .collect();
    Estimate::from_samples(&s, (theta * theta - gamma * gamma) * paths.grid.horizon)
}

/// Product rule check for `y_t = f t + z W_t - g (B_T - B_t)` and
/// `p_t = F t + G W_t - q (B_T - B_t)`:
/// `E[p_T y_T - p_0 y_0] = F f T² + (G z - g q) T`.
pub fn product_rule_probe(paths: &DriverPaths, f: f64, z: f64, g: f64, big_f: f64, big_g: f64, q: f64) -> Estimate {
    let n = paths.n_steps();
    let t = paths.grid.horizon;
    let w = paths.w_values();
    let tails = paths.b_tails();
    let s: Vec<f64> = (0..paths.n_particles)
        .map(|p| {
            let w_t = w[p * (n + 1) + n];
            let tail = tails[p * (n + 1)];
            let (y_t, p_t) = (f * t + z * w_t, big_f * t + big_g * w_t);
            let (y_0, p_0) = (-g * tail, -q * tail);
            p_t * y_t - p_0 * y_0
        })
        .collect();
    Estimate::from_samples(&s, big_f * f * t * t + (big_g * z - g * q) * t)
}

/// Right- and left-endpoint sums `Σ B_{t_{i+1}} ΔB_i` and `Σ B_{t_i} ΔB_i`;
/// their expectations are `T` and `0`.
pub fn backward_quadrature_probe(paths: &DriverPaths) -> (Estimate, Estimate) {
    let n = paths.n_steps();
    let mut right = Vec::with_capacity(paths.n_particles);
    let mut left = Vec::with_capacity(paths.n_particles);
    for p in 0..paths.n_particles {
        let (mut b, mut r, mut lsum) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let db = paths.b_increment(p, i)[0];
            lsum += b * db;
            b += db;
            r += b * db;
        }
        right.push(r);
        left.push(lsum);
    }
    (Estimate::from_samples(&right, paths.grid.horizon), Estimate::from_samples(&left, 0.0))
}
