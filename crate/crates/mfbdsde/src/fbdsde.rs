//! Fully coupled mean-field forward-backward doubly stochastic systems
//!
//! ```text
//! -dy = f(ζ, μ) dt + g(ζ, μ) d←B - z dW,   y_T = ξ,
//!  dp = F(ζ, μ) dt + G(ζ, μ) dW - q d←B,   p_0 = Ψ(y_0, L(y_0)),
//! ```
//!
//! with `ζ = (y, p, z, q)`, solved by the method of continuation. Each
//! homotopy level is a Picard iteration of a contraction map whose evaluation
//! is itself a coupled linear-in-structure system, solved by alternating a
//! backward sweep for `(y, z)` with a time-reversed sweep for `(p, q)`.
//!
//! Discretization: the backward step `i` evaluates `f, g` at `ζ_{i+1}`, the
//! forward step into grid point `j` evaluates `F, G` at `ζ_{j-1}`. Fields are
//! grid-indexed with the conventions `z_n = 0` and `q_0 = 0`.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adjoint::reverse_grid_fields;
use crate::bdsde::{self, BdsdeModel, Dims, PicardConfig, SolveConfig, StepView, ZPoint};
use crate::drivers::DriverPaths;
use crate::error::{invalid, Error, Result};
use crate::law::{wasserstein2, EmpiricalLaw, Layout, LinearMeanField, MeanFieldFn};
use crate::parallel;
use crate::problem::{eval_rows, Control, LqCoefficients, Terminal};
use crate::regression::Projector;

/// Additive forcing term of one coefficient.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum OffsetField {
    #[default]
    Zero,
    /// The same vector for every particle and grid point.
    Constant(Vec<f64>),
    /// Grid-indexed `N x width` rows.
    Field(Vec<Vec<f64>>),
}

impl OffsetField {
    fn add(&self, i: usize, out: &mut [f64], width: usize) -> Result<()> {
        match self {
            OffsetField::Zero => {}
            OffsetField::Constant(c) => {
                if c.len() != width {
                    return Err(invalid("constant offset has the wrong width"));
                }
                for row in out.chunks_mut(width) {
                    for (o, v) in row.iter_mut().zip(c) {
                        *o += v;
                    }
                }
            }
            OffsetField::Field(rows) => {
                let r = rows.get(i).ok_or_else(|| invalid("offset field is shorter than the grid"))?;
                if r.len() != out.len() {
                    return Err(invalid("offset field rows do not match the ensemble"));
                }
                for (o, v) in out.iter_mut().zip(r) {
                    *o += v;
                }
            }
        }
        Ok(())
    }
}

/// `(f0, g0, F0, G0, Ψ0)`. A `Field` for `psi0` uses its first entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Offsets {
    pub f0: OffsetField,
    pub g0: OffsetField,
    pub big_f0: OffsetField,
    pub big_g0: OffsetField,
    pub psi0: OffsetField,
}

/// The explicitly solvable end of the homotopy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Homotopy {
    /// `f → -k3 p`, `g → -k3 q`, `F → k2 y`, `G → k2 z`, `Ψ → y`.
    Monotone { k2: f64, k3: f64 },
    /// `f → -Cᵀ(Cp + Dq)`, `g → -Dᵀ(Cp + Dq)`, `F, G, Ψ → 0` (needs `l = d = 1`).
    /// `c` and `d` are row-major `n x n`.
    Structured { c: Vec<f64>, d: Vec<f64> },
}

/// Declared constants of the Lipschitz and monotonicity conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonotoneConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Declared constants of the structured (`C`, `D`) conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuredConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Coefficients of a coupled system. Every block reads rows `ζ = (y, p, z, q)`
/// of width `2n + nl + nd`; `f`, `g`, `F`, `G` return `n`, `nd`, `n`, `nl`
/// values and `psi` maps `y` to `n` values.
#[derive(Clone)]
pub struct FbdsdeSpec {
    pub dims: Dims,
    pub f: Arc<dyn MeanFieldFn>,
    pub g: Arc<dyn MeanFieldFn>,
    pub big_f: Arc<dyn MeanFieldFn>,
    pub big_g: Arc<dyn MeanFieldFn>,
    pub psi: Arc<dyn MeanFieldFn>,
    pub terminal: Terminal,
    pub offsets: Offsets,
    pub homotopy: Homotopy,
    pub monotone: Option<MonotoneConstants>,
    pub structured: Option<StructuredConstants>,
}

impl std::fmt::Debug for FbdsdeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FbdsdeSpec")
            .field("dims", &self.dims)
            .field("homotopy", &self.homotopy)
            .field("monotone", &self.monotone)
            .field("structured", &self.structured)
            .finish()
    }
}

impl FbdsdeSpec {
    pub fn zeta_width(&self) -> usize {
        2 * self.dims.n + self.dims.z_width() + self.dims.g_width()
    }

    pub fn layout(&self) -> Layout {
        let d = self.dims;
        Layout::new(&[("y", d.n), ("p", d.n), ("z", d.z_width()), ("q", d.g_width())])
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        let w = self.zeta_width();
        let checks = [
            ("f", &self.f, w, d.n),
            ("g", &self.g, w, d.g_width()),
            ("F", &self.big_f, w, d.n),
            ("G", &self.big_g, w, d.z_width()),
            ("Psi", &self.psi, d.n, d.n),
        ];
        for (name, c, i, o) in checks {
            if c.in_dim() != i || c.out_dim() != o {
                return Err(invalid(format!("{name} maps R^{} to R^{}, expected R^{i} to R^{o}", c.in_dim(), c.out_dim())));
            }
        }
        match &self.homotopy {
            Homotopy::Monotone { k2, k3 } => {
                if !(*k2 >= 0.0 && *k3 >= 0.0) {
                    return Err(Error::Config("A2: k2 >= 0 and k3 >= 0".into()));
                }
            }
            Homotopy::Structured { c, d: dm } => {
                if d.l != 1 || d.d != 1 {
                    return Err(invalid("the structured homotopy needs l = d = 1"));
                }
                if c.len() != d.n * d.n || dm.len() != d.n * d.n {
                    return Err(invalid("C and D must be n x n"));
                }
            }
        }
        if let Some(m) = &self.monotone {
            let all = [m.k1, m.k2, m.k3, m.k4, m.lambda1, m.lambda2];
            if all.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config("A1-A2: constants must be nonnegative".into()));
            }
            if !(m.k1 > 0.0) {
                return Err(Error::Config("A1: k1 > 0".into()));
            }
            if !(m.k2 + m.k3 > 0.0) {
                return Err(Error::Config("A2: k2 + k3 > 0".into()));
            }
            if !(m.k3 + m.k4 > 0.0) {
                return Err(Error::Config("A2: k3 + k4 > 0".into()));
            }
            if (m.k2 == 0.0 || m.k3 == 0.0) && !(m.lambda1 + m.lambda2 < 1.0) {
                return Err(Error::Config("A2: lambda1 + lambda2 < 1".into()));
            }
        }
        if let Some(s) = &self.structured {
            if !(s.c1 >= 0.0) {
                return Err(Error::Config("B1: c1 >= 0".into()));
            }
            if !(s.c2 > 0.0) {
                return Err(Error::Config("B1: c2 > 0".into()));
            }
            if !(s.c3 > 0.0) {
                return Err(Error::Config("B2: c3 > 0".into()));
            }
            if !(s.lambda1 >= 0.0 && s.lambda2 >= 0.0 && s.lambda1 + s.lambda2 < 1.0) {
                return Err(Error::Config("B2: lambda1 + lambda2 < 1".into()));
            }
        }
        Ok(())
    }

    /// Split rows `ζ` into their `(y, p, z, q)` column ranges.
    fn ranges(&self) -> [std::ops::Range<usize>; 4] {
        let d = self.dims;
        let (n, nz, nq) = (d.n, d.z_width(), d.g_width());
        [0..n, n..2 * n, 2 * n..2 * n + nz, 2 * n + nz..2 * n + nz + nq]
    }
}

/// Grid-indexed `(y, p, z, q)` fields of a coupled system.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FbdsdeSolution {
    pub dims: Dims,
    pub n_particles: usize,
    pub y: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

impl FbdsdeSolution {
    pub fn zeros(dims: Dims, n_particles: usize, n_steps: usize) -> Self {
        let f = |w: usize| vec![vec![0.0; n_particles * w]; n_steps + 1];
        FbdsdeSolution { dims, n_particles, y: f(dims.n), p: f(dims.n), z: f(dims.z_width()), q: f(dims.g_width()) }
    }

    pub fn n_steps(&self) -> usize {
        self.y.len() - 1
    }

    fn fields(&self) -> [&Vec<Vec<f64>>; 4] {
        [&self.y, &self.p, &self.z, &self.q]
    }

    fn combine(&self, other: &Self, f: impl Fn(f64, f64) -> f64 + Copy) -> Self {
        let mix = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| f(*u, *v)).collect()).collect()
        };
        FbdsdeSolution {
            dims: self.dims,
            n_particles: self.n_particles,
            y: mix(&self.y, &other.y),
            p: mix(&self.p, &other.p),
            z: mix(&self.z, &other.z),
            q: mix(&self.q, &other.q),
        }
    }

    /// `sqrt(E|y_0|² + Σ_i dt E|ζ_i|²)`.
    pub fn norm(&self, dt: f64) -> f64 {
        let rows = self.n_particles as f64;
        let sq = |v: &[f64]| parallel::sum_by(v.len(), |k| v[k] * v[k]) / rows;
        let mut total = sq(&self.y[0]);
        for field in self.fields() {
            total += field.iter().map(|v| sq(v)).sum::<f64>() * dt;
        }
        total.sqrt()
    }

    /// Displacement norm `‖self - other‖`.
    pub fn distance(&self, other: &Self, dt: f64) -> f64 {
        self.combine(other, |a, b| a - b).norm(dt)
    }

    /// Per-field `sqrt(Σ_i dt W2²)` between the grid-point laws of two solutions.
    pub fn w2_gaps(&self, other: &Self, dt: f64) -> Result<[f64; 4]> {
        let widths = [self.dims.n, self.dims.n, self.dims.z_width(), self.dims.g_width()];
        let mut out = [0.0; 4];
        for (k, (a, b)) in self.fields().iter().zip(other.fields()).enumerate() {
            let layout = Layout::new(&[("field", widths[k])]);
            let mut total = 0.0;
            for (x, y) in a.iter().zip(b) {
                let la = EmpiricalLaw::new(layout.clone(), x.clone())?;
                let lb = EmpiricalLaw::new(layout.clone(), y.clone())?;
                total += wasserstein2(&la, &lb, usize::MAX)?.powi(2) * dt;
            }
            out[k] = total.sqrt();
        }
        Ok(out)
    }

    /// Rows `ζ_i` (`N x (2n + nl + nd)`).
    pub fn zeta_rows(&self, i: usize) -> Vec<f64> {
        stack4(&self.y[i], &self.p[i], &self.z[i], &self.q[i], self.dims)
    }
}

fn stack4(y: &[f64], p: &[f64], z: &[f64], q: &[f64], dims: Dims) -> Vec<f64> {
    let (n, nz, nq) = (dims.n, dims.z_width(), dims.g_width());
    let w = 2 * n + nz + nq;
    let rows = y.len() / n;
    let mut out = vec![0.0; rows * w];
    parallel::fill_rows(&mut out, w, |r, o| {
        o[..n].copy_from_slice(&y[r * n..(r + 1) * n]);
        o[n..2 * n].copy_from_slice(&p[r * n..(r + 1) * n]);
        o[2 * n..2 * n + nz].copy_from_slice(&z[r * nz..(r + 1) * nz]);
        o[2 * n + nz..].copy_from_slice(&q[r * nq..(r + 1) * nq]);
    });
    out
}

/// `X(ζ)` for the four blocks, each evaluated against the law of `rows`.
fn eval_blocks(spec: &FbdsdeSpec, t: f64, rows: &[f64]) -> [Vec<f64>; 4] {
    let m = rows.len() / spec.zeta_width();
    let d = spec.dims;
    let widths = [d.n, d.g_width(), d.n, d.z_width()];
    let coeffs = [&spec.f, &spec.g, &spec.big_f, &spec.big_g];
    let mut out: [Vec<f64>; 4] = Default::default();
    for k in 0..4 {
        let mut v = vec![0.0; m * widths[k]];
        eval_rows(coeffs[k].as_ref(), t, rows, rows, &mut v);
        out[k] = v;
    }
    out
}

/// Homotopy end `X_b(ζ)` for the four blocks.
fn base_blocks(spec: &FbdsdeSpec, rows: &[f64]) -> [Vec<f64>; 4] {
    let d = spec.dims;
    let w = spec.zeta_width();
    let m = rows.len() / w;
    let [ry, rp, rz, rq] = spec.ranges();
    let mut fb = vec![0.0; m * d.n];
    let mut gb = vec![0.0; m * d.g_width()];
    let mut bf = vec![0.0; m * d.n];
    let mut bg = vec![0.0; m * d.z_width()];
    match &spec.homotopy {
        Homotopy::Monotone { k2, k3 } => {
            for r in 0..m {
                let row = &rows[r * w..(r + 1) * w];
                for (o, v) in fb[r * d.n..(r + 1) * d.n].iter_mut().zip(&row[rp.clone()]) {
                    *o = -k3 * v;
                }
                for (o, v) in gb[r * d.g_width()..(r + 1) * d.g_width()].iter_mut().zip(&row[rq.clone()]) {
                    *o = -k3 * v;
                }
                for (o, v) in bf[r * d.n..(r + 1) * d.n].iter_mut().zip(&row[ry.clone()]) {
                    *o = k2 * v;
                }
                for (o, v) in bg[r * d.z_width()..(r + 1) * d.z_width()].iter_mut().zip(&row[rz.clone()]) {
                    *o = k2 * v;
                }
            }
        }
        Homotopy::Structured { c, d: dm } => {
            let n = d.n;
            for r in 0..m {
                let row = &rows[r * w..(r + 1) * w];
                let (p, q) = (&row[rp.clone()], &row[rq.clone()]);
                let s: Vec<f64> = (0..n)
                    .map(|a| (0..n).map(|b| c[a * n + b] * p[b] + dm[a * n + b] * q[b]).sum())
                    .collect();
                for a in 0..n {
                    fb[r * n + a] = -(0..n).map(|b| c[b * n + a] * s[b]).sum::<f64>();
                    gb[r * n + a] = -(0..n).map(|b| dm[b * n + a] * s[b]).sum::<f64>();
                }
            }
        }
    }
    [fb, gb, bf, bg]
}

fn eval_psi(spec: &FbdsdeSpec, y0: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; y0.len()];
    eval_rows(spec.psi.as_ref(), 0.0, y0, y0, &mut out);
    out
}

fn base_psi(spec: &FbdsdeSpec, y0: &[f64]) -> Vec<f64> {
    match spec.homotopy {
        Homotopy::Monotone { .. } => y0.to_vec(),
        Homotopy::Structured { .. } => vec![0.0; y0.len()],
    }
}

/// Grid-indexed additive forcing of the four blocks plus the `p_0` shift.
#[derive(Debug, Clone)]
struct Forcing {
    blocks: [Vec<Vec<f64>>; 4],
    psi: Vec<f64>,
}

impl Forcing {
    fn offsets(spec: &FbdsdeSpec, rows: usize, n_steps: usize) -> Result<Self> {
        let d = spec.dims;
        let widths = [d.n, d.g_width(), d.n, d.z_width()];
        let src = [&spec.offsets.f0, &spec.offsets.g0, &spec.offsets.big_f0, &spec.offsets.big_g0];
        let mut blocks: [Vec<Vec<f64>>; 4] = Default::default();
        for k in 0..4 {
            blocks[k] = (0..=n_steps)
                .map(|i| {
                    let mut v = vec![0.0; rows * widths[k]];
                    src[k].add(i, &mut v, widths[k]).map(|_| v)
                })
                .collect::<Result<_>>()?;
        }
        let mut psi = vec![0.0; rows * d.n];
        spec.offsets.psi0.add(0, &mut psi, d.n)?;
        Ok(Forcing { blocks, psi })
    }

    /// Offsets plus `δ (X(ζ̄) - X_b(ζ̄))`.
    fn contraction(spec: &FbdsdeSpec, delta: f64, bar: &FbdsdeSolution, paths: &DriverPaths) -> Result<Self> {
        let n_steps = paths.n_steps();
        let mut out = Self::offsets(spec, bar.n_particles, n_steps)?;
        if delta == 0.0 {
            return Ok(out);
        }
        for i in 0..=n_steps {
            let rows = bar.zeta_rows(i);
            let full = eval_blocks(spec, paths.grid.t(i), &rows);
            let base = base_blocks(spec, &rows);
            for k in 0..4 {
                for ((o, a), b) in out.blocks[k][i].iter_mut().zip(&full[k]).zip(&base[k]) {
                    *o += delta * (a - b);
                }
            }
        }
        let full = eval_psi(spec, &bar.y[0]);
        let base = base_psi(spec, &bar.y[0]);
        for ((o, a), b) in out.psi.iter_mut().zip(&full).zip(&base) {
            *o += delta * (a - b);
        }
        Ok(out)
    }
}

/// `α X(ζ) + (1 - α) X_b(ζ) + forcing` for blocks `ks` at grid point `i`.
fn level_blocks(spec: &FbdsdeSpec, alpha: f64, t: f64, rows: &[f64], forcing: &Forcing, i: usize, ks: [usize; 2]) -> [Vec<f64>; 2] {
    let full = if alpha != 0.0 { Some(eval_blocks(spec, t, rows)) } else { None };
    let base = base_blocks(spec, rows);
    ks.map(|k| {
        let mut v = base[k].iter().map(|b| (1.0 - alpha) * b).collect::<Vec<f64>>();
        if let Some(full) = &full {
            for (o, a) in v.iter_mut().zip(&full[k]) {
                *o += alpha * a;
            }
        }
        for (o, c) in v.iter_mut().zip(&forcing.blocks[k][i]) {
            *o += c;
        }
        v
    })
}

/// Backward sweep for `(y, z)` with `(p, q)` frozen.
struct BackwardSide<'a> {
    spec: &'a FbdsdeSpec,
    alpha: f64,
    frozen: &'a FbdsdeSolution,
    forcing: &'a Forcing,
}

impl BdsdeModel for BackwardSide<'_> {
    fn dims(&self) -> Dims {
        self.spec.dims
    }
    fn mean_field(&self) -> bool {
        false
    }
    fn z_point(&self) -> ZPoint {
        ZPoint::Next
    }
    fn terminal(&self, paths: &DriverPaths, out: &mut [f64]) -> Result<()> {
        self.spec.terminal.fill(self.spec.dims.n, paths, out)
    }
    fn coefficients(&self, v: &StepView, f: &mut [f64], g: &mut [f64]) -> Result<()> {
        let j = v.step + 1;
        let rows = stack4(v.y, &self.frozen.p[j], v.z, &self.frozen.q[j], self.spec.dims);
        let [fv, gv] = level_blocks(self.spec, self.alpha, v.t, &rows, self.forcing, j, [0, 1]);
        f.copy_from_slice(&fv);
        g.copy_from_slice(&gv);
        Ok(())
    }
}

/// Time-reversed sweep for `(p, q)` with `(y, z)` frozen. Engine step `s`
/// fills original grid point `j = n - s` from `ζ_{j-1}`.
struct ForwardSide<'a> {
    spec: &'a FbdsdeSpec,
    alpha: f64,
    frozen: &'a FbdsdeSolution,
    forcing: &'a Forcing,
    p0: Vec<f64>,
    times: Vec<f64>,
}

impl BdsdeModel for ForwardSide<'_> {
    fn dims(&self) -> Dims {
        let d = self.spec.dims;
        Dims { n: d.n, l: d.d, d: d.l }
    }
    fn mean_field(&self) -> bool {
        false
    }
    fn z_point(&self) -> ZPoint {
        ZPoint::Next
    }
    fn terminal(&self, _paths: &DriverPaths, out: &mut [f64]) -> Result<()> {
        out.copy_from_slice(&self.p0);
        Ok(())
    }
    fn coefficients(&self, v: &StepView, f: &mut [f64], g: &mut [f64]) -> Result<()> {
        let k = self.times.len() - 2 - v.step;
        let rows = stack4(&self.frozen.y[k], v.y, &self.frozen.z[k], v.z, self.spec.dims);
        let [fv, gv] = level_blocks(self.spec, self.alpha, self.times[k], &rows, self.forcing, k, [2, 3]);
        f.copy_from_slice(&fv);
        g.copy_from_slice(&gv);
        Ok(())
    }
}

/// Paths, reversed paths and their projectors, built once per run.
struct Workspace<'a> {
    paths: &'a DriverPaths,
    reversed: DriverPaths,
    projectors: Vec<Projector>,
    reversed_projectors: Vec<Projector>,
    single: PicardConfig,
}

impl<'a> Workspace<'a> {
    fn new(paths: &'a DriverPaths, cfg: &SolveConfig) -> Result<Self> {
        let reversed = paths.reversed();
        Ok(Workspace {
            paths,
            projectors: bdsde::build_projectors(paths, &cfg.regression)?,
            reversed_projectors: bdsde::build_projectors(&reversed, &cfg.regression)?,
            reversed,
            single: PicardConfig { tol: 0.0, max_iter: 1 },
        })
    }

    fn dt(&self) -> f64 {
        self.paths.grid.dt
    }

    fn times(&self) -> Vec<f64> {
        (0..=self.paths.n_steps()).map(|i| self.paths.grid.t(i)).collect()
    }

    /// One Gauss-Seidel pass: `(y, z)` from `(p, q)`, then `(p, q)` from the new `(y, z)`.
    fn alternate(&self, spec: &FbdsdeSpec, alpha: f64, forcing: &Forcing, cur: &FbdsdeSolution) -> Result<FbdsdeSolution> {
        let back = BackwardSide { spec, alpha, frozen: cur, forcing };
        let yz = bdsde::solve_model_with(&back, self.paths, &self.projectors, &self.single)?;
        let mut next = cur.clone();
        next.y = yz.y;
        next.z = yz.z;
        let y0 = &next.y[0];
        let full = eval_psi(spec, y0);
        let base = base_psi(spec, y0);
        let p0 = (0..y0.len()).map(|k| alpha * full[k] + (1.0 - alpha) * base[k] + forcing.psi[k]).collect();
        let fwd = ForwardSide { spec, alpha, frozen: &next, forcing, p0, times: self.times() };
        let pq = bdsde::solve_model_with(&fwd, &self.reversed, &self.reversed_projectors, &self.single)?;
        next.p = reverse_grid_fields(&pq.y);
        next.q = reverse_grid_fields(&pq.z);
        Ok(next)
    }
}

/// Inner alternation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerConfig {
    /// Relative tolerance on the displacement norm.
    pub tol: f64,
    pub max_iter: usize,
    /// Anderson acceleration memory; 0 gives plain alternation.
    pub depth: usize,
}

impl Default for InnerConfig {
    fn default() -> Self {
        InnerConfig { tol: 1e-10, max_iter: 100, depth: 5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InnerReport {
    pub iterations: usize,
    pub displacements: Vec<f64>,
    pub converged: bool,
}

impl FbdsdeSolution {
    fn flatten(&self) -> Vec<f64> {
        self.fields().iter().flat_map(|f| f.iter().flatten().copied()).collect()
    }

    fn unflatten(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        let mut at = 0;
        for field in [&mut out.y, &mut out.p, &mut out.z, &mut out.q] {
            for v in field.iter_mut() {
                let len = v.len();
                v.copy_from_slice(&flat[at..at + len]);
                at += len;
            }
        }
        out
    }
}

/// Anderson-accelerated alternation `x ↦ G(x)` to a fixed point. Returns the
/// last image `G(x)`.
fn solve_level(
    ws: &Workspace,
    spec: &FbdsdeSpec,
    alpha: f64,
    forcing: &Forcing,
    init: FbdsdeSolution,
    cfg: &InnerConfig,
) -> Result<(FbdsdeSolution, InnerReport)> {
    let dt = ws.dt();
    let mut x = init;
    let mut report = InnerReport::default();
    let mut images: Vec<Vec<f64>> = Vec::new();
    let mut residuals: Vec<Vec<f64>> = Vec::new();
    let mut best = f64::INFINITY;
    for it in 1..=cfg.max_iter {
        let gx = ws.alternate(spec, alpha, forcing, &x)?;
        let disp = gx.distance(&x, dt);
        report.iterations = it;
        report.displacements.push(disp);
        if !disp.is_finite() {
            return Ok((gx, report));
        }
        if disp <= cfg.tol * (1.0 + gx.norm(dt)) {
            report.converged = true;
            return Ok((gx, report));
        }
        // Restart the memory when the accelerated iterate went astray.
        if disp > 10.0 * best {
            images.clear();
            residuals.clear();
        }
        best = best.min(disp);
        let g = gx.flatten();
        let r: Vec<f64> = g.iter().zip(x.flatten()).map(|(a, b)| a - b).collect();
        images.push(g);
        residuals.push(r);
        if images.len() > cfg.depth + 1 {
            images.remove(0);
            residuals.remove(0);
        }
        let m = images.len() - 1;
        let mut next = images[m].clone();
        if m > 0 {
            let len = next.len();
            let dr = DMatrix::from_fn(len, m, |k, j| residuals[j + 1][k] - residuals[j][k]);
            let rhs = nalgebra::DVector::from_column_slice(&residuals[m]);
            // Truncated SVD guards against a collinear history.
            let svd = dr.svd(true, true);
            let eps = 1e-10 * svd.singular_values.max();
            if let Ok(gamma) = svd.solve(&rhs, eps) {
                for j in 0..m {
                    let c = gamma[j];
                    for k in 0..len {
                        next[k] -= c * (images[j + 1][k] - images[j][k]);
                    }
                }
            }
        }
        x = gx.unflatten(&next);
    }
    let gx = ws.alternate(spec, alpha, forcing, &x)?;
    Ok((gx, report))
}

fn check_spec(spec: &FbdsdeSpec, paths: &DriverPaths) -> Result<()> {
    spec.validate()?;
    if spec.dims.l != paths.w_dim || spec.dims.d != paths.b_dim {
        return Err(invalid("driver dimensions do not match the system"));
    }
    Ok(())
}

fn initial_or_zero(spec: &FbdsdeSpec, paths: &DriverPaths, init: Option<&FbdsdeSolution>) -> Result<FbdsdeSolution> {
    match init {
        Some(s) => {
            if s.n_particles != paths.n_particles || s.n_steps() != paths.n_steps() || s.dims != spec.dims {
                return Err(invalid("initial iterate does not match the ensemble"));
            }
            Ok(s.clone())
        }
        None => Ok(FbdsdeSolution::zeros(spec.dims, paths.n_particles, paths.n_steps())),
    }
}

/// Solve the `α = 0` end of the homotopy with the system's offsets.
pub fn solve_alpha0(
    spec: &FbdsdeSpec,
    paths: &DriverPaths,
    cfg: &SolveConfig,
    inner: &InnerConfig,
    init: Option<&FbdsdeSolution>,
) -> Result<(FbdsdeSolution, InnerReport)> {
    check_spec(spec, paths)?;
    let ws = Workspace::new(paths, cfg)?;
    let forcing = Forcing::offsets(spec, paths.n_particles, paths.n_steps())?;
    solve_level(&ws, spec, 0.0, &forcing, initial_or_zero(spec, paths, init)?, inner)
}

/// Exact `α = 0` solution on a full Bernoulli tree by one dense linear solve
/// of the discrete equations (scalar systems only).
pub fn solve_alpha0_on_tree(spec: &FbdsdeSpec, paths: &DriverPaths) -> Result<FbdsdeSolution> {
    check_spec(spec, paths)?;
    if spec.dims != (Dims { n: 1, l: 1, d: 1 }) {
        return Err(Error::Unsupported("the dense tree solve handles scalar systems only".into()));
    }
    if !paths.is_full_tree() {
        return Err(invalid("the dense tree solve needs a full Bernoulli tree"));
    }
    let (k2, k3) = match spec.homotopy {
        Homotopy::Monotone { k2, k3 } => (k2, k3),
        Homotopy::Structured { .. } => {
            return Err(Error::Unsupported("the dense tree solve covers the monotone base system".into()))
        }
    };
    let m = paths.n_particles;
    let n = paths.n_steps();
    let dt = paths.grid.dt;
    let forcing = Forcing::offsets(spec, m, n)?;
    let mut xi = vec![0.0; m];
    spec.terminal.fill(1, paths, &mut xi)?;
    let idx = |field: usize, i: usize, r: usize| (field * (n + 1) + i) * m + r;
    let size = 4 * (n + 1) * m;
    if size > 4096 {
        return Err(Error::Capacity(format!("dense tree system of size {size} exceeds 4096")));
    }
    let mut a = DMatrix::<f64>::zeros(size, size);
    let mut b = nalgebra::DVector::<f64>::zeros(size);
    let dw = |r: usize, i: usize| paths.w_increment(r, i)[0];
    let db = |r: usize, i: usize| paths.b_increment(r, i)[0];
    let sign = |x: f64| x > 0.0;
    // Particles sharing the W signs of steps `..w_end` and the B signs of steps `b_start..`.
    let groups = |w_end: usize, b_start: usize| {
        let mut by_key: std::collections::BTreeMap<Vec<bool>, Vec<usize>> = Default::default();
        for r in 0..m {
            let key = (0..w_end).map(|s| sign(dw(r, s))).chain((b_start..n).map(|s| sign(db(r, s)))).collect();
            by_key.entry(key).or_default().push(r);
        }
        let mut out = vec![Vec::new(); m];
        for members in by_key.values() {
            for &r in members {
                out[r] = members.clone();
            }
        }
        out
    };
    let (y, p, z, q) = (0, 1, 2, 3);
    for r in 0..m {
        a[(idx(y, n, r), idx(y, n, r))] = 1.0;
        b[idx(y, n, r)] = xi[r];
        a[(idx(z, n, r), idx(z, n, r))] = 1.0;
        a[(idx(q, 0, r), idx(q, 0, r))] = 1.0;
        a[(idx(p, 0, r), idx(p, 0, r))] = 1.0;
        a[(idx(p, 0, r), idx(y, 0, r))] = -1.0;
        b[idx(p, 0, r)] = forcing.psi[r];
    }
    // Backward half: y_i = E_i[y_{i+1} + f dt] + E_i[g] ΔB_i and z_i dt = E_i[(y_{i+1} + f dt) ΔW_i] + E_i[g ΔW_i] ΔB_i.
    for i in 0..n {
        let g = groups(i, i + 1);
        for r in 0..m {
            let w = 1.0 / g[r].len() as f64;
            let (ry, rz) = (idx(y, i, r), idx(z, i, r));
            a[(ry, ry)] += 1.0;
            a[(rz, rz)] += dt;
            for &s in &g[r] {
                let (f0, g0) = (forcing.blocks[0][i + 1][s], forcing.blocks[1][i + 1][s]);
                for (row, x) in [(ry, 1.0), (rz, dw(s, i))] {
                    a[(row, idx(y, i + 1, s))] -= w * x;
                    a[(row, idx(p, i + 1, s))] += w * x * k3 * dt;
                    a[(row, idx(q, i + 1, s))] += w * x * k3 * db(r, i);
                    b[row] += w * x * (f0 * dt + g0 * db(r, i));
                }
            }
        }
    }
    // Forward half, mirrored: p_j from ζ_{j-1}, conditioned on W before step j - 1 and B after step j - 1.
    for j in 1..=n {
        let g = groups(j - 1, j);
        for r in 0..m {
            let w = 1.0 / g[r].len() as f64;
            let (rp, rq) = (idx(p, j, r), idx(q, j, r));
            a[(rp, rp)] += 1.0;
            a[(rq, rq)] += dt;
            for &s in &g[r] {
                let (bf0, bg0) = (forcing.blocks[2][j - 1][s], forcing.blocks[3][j - 1][s]);
                for (row, x) in [(rp, 1.0), (rq, db(s, j - 1))] {
                    a[(row, idx(p, j - 1, s))] -= w * x;
                    a[(row, idx(y, j - 1, s))] -= w * x * k2 * dt;
                    a[(row, idx(z, j - 1, s))] -= w * x * k2 * dw(r, j - 1);
                    b[row] += w * x * (bf0 * dt + bg0 * dw(r, j - 1));
                }
            }
        }
    }
    let sol = a.lu().solve(&b).ok_or_else(|| Error::Numerical("singular tree system".into()))?;
    let field = |f: usize| (0..=n).map(|i| (0..m).map(|r| sol[idx(f, i, r)]).collect()).collect();
    Ok(FbdsdeSolution { dims: spec.dims, n_particles: m, y: field(y), p: field(p), z: field(z), q: field(q) })
}

/// The map `ζ̄ ↦ ζ`: solve the `α0` system forced by `δ (X(ζ̄) - X_b(ζ̄))`.
pub fn contraction_step(
    spec: &FbdsdeSpec,
    alpha0: f64,
    delta: f64,
    bar: &FbdsdeSolution,
    paths: &DriverPaths,
    cfg: &SolveConfig,
    inner: &InnerConfig,
) -> Result<(FbdsdeSolution, InnerReport)> {
    check_spec(spec, paths)?;
    let ws = Workspace::new(paths, cfg)?;
    step_with(&ws, spec, alpha0, delta, bar, inner)
}

fn step_with(
    ws: &Workspace,
    spec: &FbdsdeSpec,
    alpha0: f64,
    delta: f64,
    bar: &FbdsdeSolution,
    inner: &InnerConfig,
) -> Result<(FbdsdeSolution, InnerReport)> {
    if !(alpha0 >= 0.0 && delta >= 0.0 && alpha0 + delta <= 1.0 + 1e-12) {
        return Err(invalid("contraction step needs alpha0, delta >= 0 and alpha0 + delta <= 1"));
    }
    let forcing = Forcing::contraction(spec, delta, bar, ws.paths)?;
    solve_level(ws, spec, alpha0, &forcing, bar.clone(), inner)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContinuationConfig {
    pub delta: f64,
    pub delta_min: f64,
    /// Relative tolerance of each Picard iteration of the contraction map.
    pub tol: f64,
    pub max_iter: usize,
    pub inner: InnerConfig,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        ContinuationConfig { delta: 0.1, delta_min: 1e-3, tol: 1e-8, max_iter: 100, inner: InnerConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum ContinuationStatus {
    Converged,
    BaseFailed,
    DeltaUnderflow { last_alpha: f64 },
}

/// Trace of a continuation run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuationState {
    pub alpha: f64,
    pub delta: f64,
    #[serde(skip)]
    pub iterate: FbdsdeSolution,
    /// Accepted homotopy parameters, starting at 0.
    pub accepted_alphas: Vec<f64>,
    /// Step used for each accepted advance.
    pub delta_history: Vec<f64>,
    /// Picard displacements of each accepted advance.
    pub displacements: Vec<Vec<f64>>,
    /// Ratios of consecutive displacements of each accepted advance.
    pub contraction_ratios: Vec<Vec<f64>>,
    pub inner_iterations: Vec<usize>,
    pub retries: usize,
    /// Absolute tolerance the final Picard iteration was held to.
    pub tolerance: f64,
    pub status: ContinuationStatus,
}

impl ContinuationState {
    pub fn max_contraction_ratio(&self) -> f64 {
        self.contraction_ratios.iter().flatten().fold(0.0f64, |a, b| a.max(*b))
    }

    /// Accepted advances, excluding the base solve.
    pub fn accepted_steps(&self) -> usize {
        self.accepted_alphas.len().saturating_sub(1)
    }
}

struct Advance {
    iterate: FbdsdeSolution,
    displacements: Vec<f64>,
    ratios: Vec<f64>,
    inner_iterations: usize,
    tolerance: f64,
}

/// Picard iteration of the contraction map at one homotopy level.
fn advance(
    ws: &Workspace,
    spec: &FbdsdeSpec,
    alpha0: f64,
    delta: f64,
    start: &FbdsdeSolution,
    cfg: &ContinuationConfig,
) -> Result<Option<Advance>> {
    let dt = ws.dt();
    let mut bar = start.clone();
    let mut out = Advance { iterate: bar.clone(), displacements: vec![], ratios: vec![], inner_iterations: 0, tolerance: 0.0 };
    let mut prev: Option<f64> = None;
    let mut growth = 0;
    for _ in 0..cfg.max_iter {
        let (next, rep) = step_with(ws, spec, alpha0, delta, &bar, &cfg.inner)?;
        out.inner_iterations += rep.iterations;
        if !rep.converged {
            return Ok(None);
        }
        let disp = next.distance(&bar, dt);
        let scale = 1.0 + next.norm(dt);
        let tol = cfg.tol * scale;
        // Displacements at the inner tolerance carry no contraction information.
        let floor = 10.0 * cfg.inner.tol * scale;
        out.displacements.push(disp);
        bar = next;
        if !disp.is_finite() {
            return Ok(None);
        }
        if disp <= floor {
            out.tolerance = tol;
            out.iterate = bar;
            return Ok(Some(out));
        }
        if let Some(pd) = prev.filter(|pd| *pd > floor) {
            let r = disp / pd;
            out.ratios.push(r);
            if r >= 1.0 {
                growth += 1;
                if growth >= 3 {
                    return Ok(None);
                }
            } else {
                growth = 0;
                // A-posteriori bound on the distance to the fixed point.
                if disp * r / (1.0 - r) <= 0.5 * tol {
                    out.tolerance = tol;
                    out.iterate = bar;
                    return Ok(Some(out));
                }
            }
        }
        prev = Some(disp);
    }
    Ok(None)
}

/// Method of continuation from `α = 0` to `α = 1`. `initial` seeds the base
/// solve and the first Picard iteration.
pub fn continuation_solve(
    spec: &FbdsdeSpec,
    paths: &DriverPaths,
    cfg: &SolveConfig,
    cont: &ContinuationConfig,
    initial: Option<&FbdsdeSolution>,
) -> Result<(FbdsdeSolution, ContinuationState)> {
    check_spec(spec, paths)?;
    if !(cont.delta > 0.0 && cont.delta <= 1.0 && cont.delta_min > 0.0 && cont.delta_min <= cont.delta) {
        return Err(invalid("continuation needs 0 < delta_min <= delta <= 1"));
    }
    let ws = Workspace::new(paths, cfg)?;
    let init = initial_or_zero(spec, paths, initial)?;
    let forcing = Forcing::offsets(spec, paths.n_particles, paths.n_steps())?;
    let (base, rep) = solve_level(&ws, spec, 0.0, &forcing, init.clone(), &cont.inner)?;
    let mut state = ContinuationState {
        alpha: 0.0,
        delta: cont.delta,
        iterate: base.clone(),
        accepted_alphas: vec![0.0],
        delta_history: vec![],
        displacements: vec![],
        contraction_ratios: vec![],
        inner_iterations: vec![rep.iterations],
        retries: 0,
        tolerance: 0.0,
        status: ContinuationStatus::Converged,
    };
    if !rep.converged {
        state.status = ContinuationStatus::BaseFailed;
        return Ok((base, state));
    }
    let mut current = base;
    let mut first = true;
    while state.alpha < 1.0 {
        let delta = state.delta.min(1.0 - state.alpha);
        let start = if first && initial.is_some() { &init } else { &current };
        match advance(&ws, spec, state.alpha, delta, start, cont)? {
            Some(adv) => {
                first = false;
                state.alpha = if state.alpha + delta >= 1.0 - 1e-12 { 1.0 } else { state.alpha + delta };
                state.accepted_alphas.push(state.alpha);
                state.delta_history.push(delta);
                state.displacements.push(adv.displacements);
                state.contraction_ratios.push(adv.ratios);
                state.inner_iterations.push(adv.inner_iterations);
                state.tolerance = adv.tolerance;
                current = adv.iterate;
            }
            None => {
                state.retries += 1;
                state.delta *= 0.5;
                if state.delta < cont.delta_min {
                    state.status = ContinuationStatus::DeltaUnderflow { last_alpha: state.alpha };
                    break;
                }
            }
        }
    }
    state.iterate = current.clone();
    Ok((current, state))
}

/// Residuals of both integrated identities at `α = 1`: the backward equation
/// on the original grid and the forward one on the reversed grid (returned in
/// original order).
pub fn fbdsde_residuals(
    spec: &FbdsdeSpec,
    sol: &FbdsdeSolution,
    paths: &DriverPaths,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_spec(spec, paths)?;
    let forcing = Forcing::offsets(spec, paths.n_particles, paths.n_steps())?;
    let back = BackwardSide { spec, alpha: 1.0, frozen: sol, forcing: &forcing };
    let yz = bdsde::EnsembleSolution {
        dims: spec.dims,
        n_particles: sol.n_particles,
        y: sol.y.clone(),
        z: sol.z.clone(),
        diagnostics: Default::default(),
    };
    let r_back = bdsde::residual_check_model(&back, &yz, paths)?;
    let times = (0..=paths.n_steps()).map(|i| paths.grid.t(i)).collect();
    let mut p0 = eval_psi(spec, &sol.y[0]);
    for (o, v) in p0.iter_mut().zip(&forcing.psi) {
        *o += v;
    }
    let fwd = ForwardSide { spec, alpha: 1.0, frozen: sol, forcing: &forcing, p0, times };
    let pq = bdsde::EnsembleSolution {
        dims: fwd.dims(),
        n_particles: sol.n_particles,
        y: reverse_grid_fields(&sol.p),
        z: reverse_grid_fields(&sol.q),
        diagnostics: Default::default(),
    };
    let mut r_fwd = bdsde::residual_check_model(&fwd, &pq, &paths.reversed())?;
    r_fwd.reverse();
    Ok((r_back, r_fwd))
}

// ---------------------------------------------------------------------------
// Assumption probes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Random base ensembles.
    pub bases: usize,
    /// Points per base ensemble.
    pub particles: usize,
    /// Random centered fields per block, besides one constant shift.
    pub generators_per_block: usize,
    /// Standard deviation of sampled coordinates.
    pub spread: f64,
    /// Random finite pairs checked against the estimated constants.
    pub pairs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { bases: 8, particles: 16, generators_per_block: 2, spread: 1.0, pairs: 100, seed: 0 }
    }
}

/// Lipschitz estimates (A1, first part of B2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzProbe {
    /// `sup |A(ζ, μ) - A(ζ', μ')| / (|ζ - ζ'| + W2(μ, μ'))` over sampled pairs.
    pub coefficients: f64,
    /// The same ratio for `Ψ`.
    pub psi: f64,
    /// Root-mean-square sensitivity of `g` to `z` (bounds `λ1 + λ2` from below).
    pub g_in_z: f64,
    /// Root-mean-square sensitivity of `G` to `q`.
    pub big_g_in_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityProbe {
    pub passed: bool,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    /// Smallest eigenvalue of the sampled form `-E<A(ζ + Δ) - A(ζ), Δ>` (negative: not monotone).
    pub min_eigenvalue: f64,
    /// Finite pairs violating the estimated inequality.
    pub pair_violations: usize,
    /// Whether declared constants (if any) are consistent with the samples.
    pub declared_consistent: Option<bool>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredProbe {
    pub passed: bool,
    pub c1: f64,
    pub c2: f64,
    pub psi_monotone: bool,
    pub pair_violations: usize,
    pub declared_consistent: Option<bool>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub a1_passed: bool,
    pub lipschitz: LipschitzProbe,
    pub a2: MonotonicityProbe,
    /// Present when the system carries `C`, `D`.
    pub b1: Option<StructuredProbe>,
    pub b2_passed: Option<bool>,
}

/// Estimated constants below this count as zero.
const ZERO_CONSTANT: f64 = 1e-4;

fn min_eig(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().fold(f64::INFINITY, |a, b| a.min(*b))
}

/// `sup { κ >= 0 : Q - κ B ⪰ -ε }`; negative when `Q` itself is not.
fn max_shift(q: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let eps = 1e-9 * (1.0 + q.amax());
    let lq = min_eig(q);
    if lq < -eps {
        return lq;
    }
    let ok = |k: f64| min_eig(&(q - b * k)) >= -eps;
    let mut hi = 1.0;
    while ok(hi) {
        hi *= 2.0;
        if hi > 1e8 {
            return hi;
        }
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Quadratic forms of one base ensemble over the generator span.
struct Forms {
    /// `-E<A(ζ + Δ) - A(ζ), Δ>` (symmetrized).
    q: DMatrix<f64>,
    /// `E[|Δy|² + |Δz|²]` and `E[|Δp|² + |Δq|²]`.
    gy: DMatrix<f64>,
    gp: DMatrix<f64>,
    /// `E|C Δp + D Δq|²` when structured.
    gcd: Option<DMatrix<f64>>,
    /// `E<Ψ(y + Δy) - Ψ(y), Δy>` and `E|Δy|²` on the `y` generators.
    psi: DMatrix<f64>,
    gy0: DMatrix<f64>,
}

struct Probe<'a> {
    spec: &'a FbdsdeSpec,
    m: usize,
    w: usize,
}

impl Probe<'_> {
    fn monotone_sum(&self, base: &[f64], delta: &[f64]) -> f64 {
        let moved: Vec<f64> = base.iter().zip(delta).map(|(a, b)| a + b).collect();
        let a1 = eval_blocks(self.spec, 0.0, &moved);
        let a0 = eval_blocks(self.spec, 0.0, base);
        let [ry, rp, rz, rq] = self.spec.ranges();
        let d = self.spec.dims;
        let (n, nz, nq) = (d.n, d.z_width(), d.g_width());
        let mut total = 0.0;
        for r in 0..self.m {
            let dr = &delta[r * self.w..(r + 1) * self.w];
            let dot = |k: usize, width: usize, range: &std::ops::Range<usize>, sign: f64| -> f64 {
                (0..width).map(|c| sign * (a1[k][r * width + c] - a0[k][r * width + c]) * dr[range.start + c]).sum()
            };
            // <A, Δζ> with A = (-F, f, -G, g) against (y, p, z, q).
            total += dot(2, n, &ry, -1.0) + dot(0, n, &rp, 1.0) + dot(3, nz, &rz, -1.0) + dot(1, nq, &rq, 1.0);
        }
        total / self.m as f64
    }

    fn psi_sum(&self, y: &[f64], dy: &[f64]) -> f64 {
        let moved: Vec<f64> = y.iter().zip(dy).map(|(a, b)| a + b).collect();
        let a1 = eval_psi(self.spec, &moved);
        let a0 = eval_psi(self.spec, y);
        a1.iter().zip(&a0).zip(dy).map(|((u, v), d)| (u - v) * d).sum::<f64>() / self.m as f64
    }

    fn forms(&self, base: &[f64], gens: &[Vec<f64>]) -> Forms {
        let k = gens.len();
        let h = 1e-3;
        let scaled = |g: &[f64], s: f64| g.iter().map(|v| v * s).collect::<Vec<f64>>();
        let diag: Vec<f64> = gens.iter().map(|g| self.monotone_sum(base, &scaled(g, h)) / (h * h)).collect();
        let mut q = DMatrix::zeros(k, k);
        for a in 0..k {
            q[(a, a)] = -diag[a];
            for b in a + 1..k {
                let sum: Vec<f64> = gens[a].iter().zip(&gens[b]).map(|(x, y)| h * (x + y)).collect();
                let v = (self.monotone_sum(base, &sum) / (h * h) - diag[a] - diag[b]) / 2.0;
                q[(a, b)] = -v;
                q[(b, a)] = -v;
            }
        }
        let [ry, rp, rz, rq] = self.spec.ranges();
        let gram = |ranges: &[&std::ops::Range<usize>]| {
            DMatrix::from_fn(k, k, |a, b| {
                let mut s = 0.0;
                for r in 0..self.m {
                    for range in ranges {
                        for c in (*range).clone() {
                            s += gens[a][r * self.w + c] * gens[b][r * self.w + c];
                        }
                    }
                }
                s / self.m as f64
            })
        };
        let gy = gram(&[&ry, &rz]);
        let gp = gram(&[&rp, &rq]);
        let gcd = match &self.spec.homotopy {
            Homotopy::Structured { c, d } => {
                let n = self.spec.dims.n;
                let mapped: Vec<Vec<f64>> = gens
                    .iter()
                    .map(|g| {
                        let mut out = vec![0.0; self.m * n];
                        for r in 0..self.m {
                            let row = &g[r * self.w..(r + 1) * self.w];
                            for i in 0..n {
                                out[r * n + i] = (0..n).map(|j| c[i * n + j] * row[rp.start + j] + d[i * n + j] * row[rq.start + j]).sum();
                            }
                        }
                        out
                    })
                    .collect();
                Some(DMatrix::from_fn(k, k, |a, b| {
                    mapped[a].iter().zip(&mapped[b]).map(|(x, y)| x * y).sum::<f64>() / self.m as f64
                }))
            }
            Homotopy::Monotone { .. } => None,
        };
        // Ψ on the generators that move y.
        let n = self.spec.dims.n;
        let ys: Vec<Vec<f64>> = gens
            .iter()
            .filter(|g| (0..self.m).any(|r| g[r * self.w..r * self.w + n].iter().any(|v| *v != 0.0)))
            .map(|g| (0..self.m).flat_map(|r| g[r * self.w..r * self.w + n].to_vec()).collect())
            .collect();
        let y0: Vec<f64> = (0..self.m).flat_map(|r| base[r * self.w..r * self.w + n].to_vec()).collect();
        let ky = ys.len();
        let pdiag: Vec<f64> = ys.iter().map(|g| self.psi_sum(&y0, &scaled(g, h)) / (h * h)).collect();
        let mut psi = DMatrix::zeros(ky, ky);
        for a in 0..ky {
            psi[(a, a)] = pdiag[a];
            for b in a + 1..ky {
                let sum: Vec<f64> = ys[a].iter().zip(&ys[b]).map(|(x, y)| h * (x + y)).collect();
                let v = (self.psi_sum(&y0, &sum) / (h * h) - pdiag[a] - pdiag[b]) / 2.0;
                psi[(a, b)] = v;
                psi[(b, a)] = v;
            }
        }
        let gy0 = DMatrix::from_fn(ky, ky, |a, b| ys[a].iter().zip(&ys[b]).map(|(x, y)| x * y).sum::<f64>() / self.m as f64);
        Forms { q, gy, gp, gcd, psi, gy0 }
    }

    /// RMS ratio `‖X(ζ + Δ) - X(ζ)‖ / ‖Δ‖` of block `k` over perturbations `dirs`.
    fn sensitivity(&self, base: &[f64], dirs: &[Vec<f64>], k: usize, range: std::ops::Range<usize>) -> f64 {
        let a0 = eval_blocks(self.spec, 0.0, base);
        let mut worst = 0.0f64;
        for dir in dirs {
            let moved: Vec<f64> = base.iter().zip(dir).map(|(a, b)| a + b).collect();
            let a1 = eval_blocks(self.spec, 0.0, &moved);
            let num: f64 = a1[k].iter().zip(&a0[k]).map(|(x, y)| (x - y).powi(2)).sum();
            let den: f64 = (0..self.m).map(|r| dir[r * self.w + range.start..r * self.w + range.end].iter().map(|v| v * v).sum::<f64>()).sum();
            if den > 0.0 {
                worst = worst.max((num / den).sqrt());
            }
        }
        worst
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

/// Sample-based check of (A1)–(A2) and, for structured specs, (B1)–(B2).
pub fn probe_assumptions(spec: &FbdsdeSpec, cfg: &ProbeConfig) -> Result<AssumptionReport> {
    spec.validate()?;
    let m = cfg.particles.max(2);
    let w = spec.zeta_width();
    let probe = Probe { spec, m, w };
    let ranges = spec.ranges();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xa55e_55ed);
    let gens_of = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
        let mut gens = Vec::new();
        for range in &ranges {
            for _ in 0..cfg.generators_per_block {
                let mut g = vec![0.0; m * w];
                for c in range.clone() {
                    let col: Vec<f64> = (0..m).map(|_| normal(rng)).collect();
                    let mean = col.iter().sum::<f64>() / m as f64;
                    for r in 0..m {
                        g[r * w + c] = col[r] - mean;
                    }
                }
                gens.push(g);
            }
            let shift: Vec<f64> = range.clone().map(|_| normal(rng)).collect();
            let mut g = vec![0.0; m * w];
            for r in 0..m {
                for (k, c) in range.clone().enumerate() {
                    g[r * w + c] = shift[k];
                }
            }
            gens.push(g);
        }
        gens
    };

    let mut forms = Vec::new();
    let mut lambda_g = 0.0f64;
    let mut lambda_big_g = 0.0f64;
    let mut bases = Vec::new();
    for _ in 0..cfg.bases.max(1) {
        let base: Vec<f64> = (0..m * w).map(|_| cfg.spread * normal(&mut rng)).collect();
        let gens = gens_of(&mut rng);
        let per = cfg.generators_per_block + 1;
        // Generators are grouped by block in (y, p, z, q) order.
        let z_dirs: Vec<Vec<f64>> = gens[2 * per..3 * per].to_vec();
        let q_dirs: Vec<Vec<f64>> = gens[3 * per..4 * per].to_vec();
        lambda_g = lambda_g.max(probe.sensitivity(&base, &z_dirs, 1, ranges[2].clone()));
        lambda_big_g = lambda_big_g.max(probe.sensitivity(&base, &q_dirs, 3, ranges[3].clone()));
        forms.push(probe.forms(&base, &gens));
        bases.push(base);
    }

    // Lipschitz ratios on random finite pairs.
    let layout = Layout::new(&[("zeta", w)]);
    let mut lip = 0.0f64;
    let mut lip_psi = 0.0f64;
    let mut pairs = Vec::new();
    let n = spec.dims.n;
    for k in 0..cfg.pairs {
        let base = &bases[k % bases.len()];
        let scale = cfg.spread * (0.1 + normal(&mut rng).abs());
        let delta: Vec<f64> = (0..m * w).map(|_| scale * normal(&mut rng)).collect();
        let moved: Vec<f64> = base.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let a0 = eval_blocks(spec, 0.0, base);
        let a1 = eval_blocks(spec, 0.0, &moved);
        let w2 = wasserstein2(&EmpiricalLaw::new(layout.clone(), base.clone())?, &EmpiricalLaw::new(layout.clone(), moved.clone())?, usize::MAX)?;
        for r in 0..m {
            let dz: f64 = delta[r * w..(r + 1) * w].iter().map(|v| v * v).sum::<f64>().sqrt();
            let da: f64 = (0..4)
                .map(|b| {
                    let width = a0[b].len() / m;
                    (0..width).map(|c| (a1[b][r * width + c] - a0[b][r * width + c]).powi(2)).sum::<f64>()
                })
                .sum::<f64>()
                .sqrt();
            lip = lip.max(da / (dz + w2));
        }
        let y0: Vec<f64> = (0..m).flat_map(|r| base[r * w..r * w + n].to_vec()).collect();
        let y1: Vec<f64> = (0..m).flat_map(|r| moved[r * w..r * w + n].to_vec()).collect();
        let ly = Layout::new(&[("y", n)]);
        let w2y = wasserstein2(&EmpiricalLaw::new(ly.clone(), y0.clone())?, &EmpiricalLaw::new(ly, y1.clone())?, usize::MAX)?;
        let p0 = eval_psi(spec, &y0);
        let p1 = eval_psi(spec, &y1);
        for r in 0..m {
            let dy: f64 = (0..n).map(|c| (y1[r * n + c] - y0[r * n + c]).powi(2)).sum::<f64>().sqrt();
            let dp: f64 = (0..n).map(|c| (p1[r * n + c] - p0[r * n + c]).powi(2)).sum::<f64>().sqrt();
            if dy + w2y > 0.0 {
                lip_psi = lip_psi.max(dp / (dy + w2y));
            }
        }
        pairs.push((k % bases.len(), delta));
    }
    let lipschitz = LipschitzProbe { coefficients: lip, psi: lip_psi, g_in_z: lambda_g, big_g_in_q: lambda_big_g };
    let a1_passed = lip.is_finite() && lip_psi.is_finite() && spec.monotone.map_or(true, |c| lip <= c.k1 * (1.0 + 1e-9) && lip_psi <= c.k1 * (1.0 + 1e-9));

    // Pair sums for the finite check.
    let pair_terms: Vec<(f64, f64, f64, f64)> = pairs
        .iter()
        .map(|(b, delta)| {
            let s = probe.monotone_sum(&bases[*b], delta);
            let (mut y, mut p, mut cd) = (0.0, 0.0, 0.0);
            for r in 0..m {
                let row = &delta[r * w..(r + 1) * w];
                y += ranges[0].clone().chain(ranges[2].clone()).map(|c| row[c] * row[c]).sum::<f64>();
                p += ranges[1].clone().chain(ranges[3].clone()).map(|c| row[c] * row[c]).sum::<f64>();
                if let Homotopy::Structured { c, d } = &spec.homotopy {
                    for i in 0..n {
                        let v: f64 = (0..n).map(|j| c[i * n + j] * row[ranges[1].start + j] + d[i * n + j] * row[ranges[3].start + j]).sum();
                        cd += v * v;
                    }
                }
            }
            (s, y / m as f64, p / m as f64, cd / m as f64)
        })
        .collect();
    let pair_violations = |k2: f64, k3: f64, c2: f64| -> usize {
        pair_terms
            .iter()
            .filter(|(s, y, p, cd)| *s + k2 * y + k3 * p + c2 * cd > 1e-9 * (1.0 + s.abs() + y + p + cd))
            .count()
    };

    let min_eigenvalue = forms.iter().map(|f| min_eig(&f.q)).fold(f64::INFINITY, f64::min);
    let k4 = forms.iter().map(|f| max_shift(&f.psi, &f.gy0)).fold(f64::INFINITY, f64::min);
    let psi_monotone = forms.iter().all(|f| min_eig(&f.psi) >= -1e-9 * (1.0 + f.psi.amax()));

    // (A2): best split κ(θ, 1 - θ) that satisfies the structural side conditions.
    let mut best: Option<(f64, f64)> = None;
    let mut fallback = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    for step in 0..=10 {
        let theta = step as f64 / 10.0;
        let kappa = forms
            .iter()
            .map(|f| max_shift(&f.q, &(&f.gy * theta + &f.gp * (1.0 - theta))))
            .fold(f64::INFINITY, f64::min);
        let (k2, k3) = (kappa * theta, kappa * (1.0 - theta));
        if kappa > fallback.2 {
            fallback = (k2, k3, kappa);
        }
        let zero2 = k2 <= ZERO_CONSTANT;
        let zero3 = k3 <= ZERO_CONSTANT;
        let valid = kappa > ZERO_CONSTANT
            && k3 + k4.max(0.0) > ZERO_CONSTANT
            && (!zero2 || lambda_g < 1.0)
            && (!zero3 || lambda_big_g < 1.0);
        if valid && best.map_or(true, |(b2, b3)| k2 + k3 > b2 + b3) {
            best = Some((k2, k3));
        }
    }
    let (k2, k3) = best.unwrap_or((fallback.0.max(0.0), fallback.1.max(0.0)));
    let a2_violations = if best.is_some() { pair_violations(k2, k3, 0.0) } else { 0 };
    let declared_a2 = spec.monotone.map(|c| {
        forms.iter().all(|f| min_eig(&(&f.q - &f.gy * c.k2 - &f.gp * c.k3)) >= -1e-9 * (1.0 + f.q.amax()))
            && c.k4 <= k4 + 1e-9
            && pair_violations(c.k2, c.k3, 0.0) == 0
            && ((c.k2 > 0.0 && c.k3 > 0.0) || lambda_g.min(lambda_big_g) <= c.lambda1 + c.lambda2 + 1e-9)
    });
    let a2_passed = best.is_some() && a2_violations == 0 && declared_a2.unwrap_or(true);
    let note = if min_eigenvalue < -1e-9 {
        "sampled monotonicity form has a positive direction".to_string()
    } else if best.is_none() {
        "no split k2 + k3 > 0 with k3 + k4 > 0 fits the samples".to_string()
    } else {
        String::new()
    };
    let a2 = MonotonicityProbe {
        passed: a2_passed,
        k2,
        k3,
        k4,
        min_eigenvalue,
        pair_violations: a2_violations,
        declared_consistent: declared_a2,
        note,
    };

    let (b1, b2_passed) = match &spec.homotopy {
        Homotopy::Structured { .. } => {
            let c2 = forms
                .iter()
                .map(|f| max_shift(&f.q, f.gcd.as_ref().expect("structured forms")))
                .fold(f64::INFINITY, f64::min);
            let c1 = if c2 > 0.0 {
                forms
                    .iter()
                    .map(|f| max_shift(&(&f.q - f.gcd.as_ref().expect("structured forms") * (0.5 * c2)), &f.gy))
                    .fold(f64::INFINITY, f64::min)
                    .max(0.0)
            } else {
                0.0
            };
            let passed_form = c2 > ZERO_CONSTANT && psi_monotone;
            let violations = if passed_form { pair_violations(0.0, 0.0, 0.5 * c2) } else { 0 };
            let declared = spec.structured.map(|s| {
                forms.iter().all(|f| {
                    min_eig(&(&f.q - &f.gy * s.c1 - f.gcd.as_ref().expect("structured forms") * s.c2))
                        >= -1e-9 * (1.0 + f.q.amax())
                }) && lip <= s.c3 * (1.0 + 1e-9)
                    && lambda_g.max(lambda_big_g) <= s.lambda1 + s.lambda2 + 1e-9
            });
            let note = if min_eigenvalue < -1e-9 {
                "sampled monotonicity form has a positive direction".to_string()
            } else if c2 <= ZERO_CONSTANT {
                "the form vanishes along a direction where |C dp + D dq| does not".to_string()
            } else if !psi_monotone {
                "Psi is not monotone on the samples".to_string()
            } else {
                String::new()
            };
            let b1 = StructuredProbe {
                passed: passed_form && violations == 0 && declared.unwrap_or(true),
                c1,
                c2,
                psi_monotone,
                pair_violations: violations,
                declared_consistent: declared,
                note,
            };
            let b2 = lip.is_finite() && lambda_g < 1.0 && lambda_big_g < 1.0;
            (Some(b1), Some(b2))
        }
        Homotopy::Monotone { .. } => (None, None),
    };
    Ok(AssumptionReport { a1_passed, lipschitz, a2, b1, b2_passed })
}

// ---------------------------------------------------------------------------
// LQ Hamiltonian system

fn lq_u_coefficients(c: &LqCoefficients) -> (f64, f64, f64, f64) {
    let (h3, hb3) = (c.h[2], c.hbar[2]);
    let (f3, fb3, g3, gb3) = (c.f[2], c.fbar[2], c.g[2], c.gbar[2]);
    let s = h3 + hb3;
    (f3, (h3 * fb3 - hb3 * f3) / s, g3, (h3 * gb3 - hb3 * g3) / s)
}

/// Pointwise optimal control `u = -(f3 p + a E[p] + g3 q + b E[q]) / h3`.
pub fn lq_feedback(c: &LqCoefficients, p: f64, q: f64, mean_p: f64, mean_q: f64) -> f64 {
    let (a_p, a_mp, a_q, a_mq) = lq_u_coefficients(c);
    -(a_p * p + a_mp * mean_p + a_q * q + a_mq * mean_q) / c.h[2]
}

/// `E[u] = -((f3 + f̄3) E[p] + (g3 + ḡ3) E[q]) / (h3 + h̄3)`.
pub fn lq_mean_control(c: &LqCoefficients, mean_p: f64, mean_q: f64) -> f64 {
    -((c.f[2] + c.fbar[2]) * mean_p + (c.g[2] + c.gbar[2]) * mean_q) / (c.h[2] + c.hbar[2])
}

/// The LQ Hamiltonian system with the optimal control substituted. Without
/// `E[u]` terms this is the structured system with `C = f3/√h3`, `D = g3/√h3`.
pub fn lq_hamiltonian_spec(c: &LqCoefficients, terminal: Terminal) -> Result<FbdsdeSpec> {
    c.validate()?;
    if c.has_mean_control() && !(c.hbar[2] > 0.0) {
        return Err(Error::Config("LQ constraint violated: hbar3 > 0 when E[u] terms are active".into()));
    }
    let (a_p, a_mp, a_q, a_mq) = lq_u_coefficients(c);
    let h3 = c.h[2];
    let s = h3 + c.hbar[2];
    // State coefficient with u and E[u] substituted; ζ = (y, p, z, q).
    let substituted = |x: [f64; 3], xb: [f64; 3]| {
        let a = vec![x[0], -x[2] * a_p / h3, x[1], -x[2] * a_q / h3];
        let abar = vec![
            xb[0],
            -x[2] * a_mp / h3 - xb[2] * (c.f[2] + c.fbar[2]) / s,
            xb[1],
            -x[2] * a_mq / h3 - xb[2] * (c.g[2] + c.gbar[2]) / s,
        ];
        LinearMeanField::new(4, 1, a, abar)
    };
    let big_f = LinearMeanField::new(4, 1, vec![c.h[0], c.f[0], 0.0, c.g[0]], vec![c.hbar[0], c.fbar[0], 0.0, c.gbar[0]]);
    let big_g = LinearMeanField::new(4, 1, vec![0.0, c.f[1], c.h[1], c.g[1]], vec![0.0, c.fbar[1], c.hbar[1], c.gbar[1]]);
    let root = h3.sqrt();
    Ok(FbdsdeSpec {
        dims: Dims { n: 1, l: 1, d: 1 },
        f: Arc::new(substituted(c.f, c.fbar)),
        g: Arc::new(substituted(c.g, c.gbar)),
        big_f: Arc::new(big_f),
        big_g: Arc::new(big_g),
        psi: Arc::new(LinearMeanField::new(1, 1, vec![c.phi], vec![c.phibar])),
        terminal,
        offsets: Offsets::default(),
        homotopy: Homotopy::Structured { c: vec![c.f[2] / root], d: vec![c.g[2] / root] },
        monotone: None,
        structured: if c.has_mean_control() || lq_lipschitz(c) == 0.0 {
            None
        } else {
            Some(StructuredConstants { c1: 0.0, c2: 1.0, c3: lq_lipschitz(c), lambda1: c.g[1].abs(), lambda2: c.gbar[1].abs() })
        },
    })
}

/// A Lipschitz constant of the substituted LQ coefficients in the Euclidean
/// norm of `(ζ, W2)`.
fn lq_lipschitz(c: &LqCoefficients) -> f64 {
    let (a_p, a_mp, a_q, a_mq) = lq_u_coefficients(c);
    let h3 = c.h[2];
    let rows = [
        [c.f[0], c.f[1], c.f[2] * a_p / h3, c.f[2] * a_q / h3, c.fbar[0], c.fbar[1], c.f[2] * a_mp / h3, c.f[2] * a_mq / h3],
        [c.g[0], c.g[1], c.g[2] * a_p / h3, c.g[2] * a_q / h3, c.gbar[0], c.gbar[1], c.g[2] * a_mp / h3, c.g[2] * a_mq / h3],
        [c.h[0], c.f[0], 0.0, c.g[0], c.hbar[0], c.fbar[0], 0.0, c.gbar[0]],
        [0.0, c.f[1], c.h[1], c.g[1], 0.0, c.fbar[1], c.hbar[1], c.gbar[1]],
    ];
    // |ΔA| <= ‖A_x‖ |Δζ| + ‖A_m‖ |ΔE ζ| and |ΔE ζ| <= W2.
    let fro = |r: std::ops::Range<usize>| rows.iter().map(|row| row[r.clone()].iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    fro(0..4).max(fro(4..8)).max(c.phi.abs() + c.phibar.abs()) * 2.0
}

/// Solution of the LQ Hamiltonian system and the control read off from it.
#[derive(Debug, Clone)]
pub struct LqHamiltonianSolution {
    pub solution: FbdsdeSolution,
    pub state: ContinuationState,
    /// `u_i` from `(p_{i+1}, q_{i+1})`, the point at which step `i` evaluates the drift.
    pub control: Control,
    /// `max_i |mean(u_i) - E[u]|`, the averaged consistency of the two formulas.
    pub mean_control_gap: f64,
}

/// Closed-form control from solved `(p, q)` fields.
pub fn lq_control_from(c: &LqCoefficients, sol: &FbdsdeSolution) -> (Control, f64) {
    let n = sol.n_steps();
    let rows = sol.n_particles;
    let mut gap = 0.0f64;
    let values = (0..n)
        .map(|i| {
            let (p, q) = (&sol.p[i + 1], &sol.q[i + 1]);
            let mp = p.iter().sum::<f64>() / rows as f64;
            let mq = q.iter().sum::<f64>() / rows as f64;
            let u: Vec<f64> = (0..rows).map(|r| lq_feedback(c, p[r], q[r], mp, mq)).collect();
            let mu = u.iter().sum::<f64>() / rows as f64;
            gap = gap.max((mu - lq_mean_control(c, mp, mq)).abs());
            u
        })
        .collect();
    (Control { k: 1, values }, gap)
}

/// Solve the LQ Hamiltonian system by continuation and read off the control.
pub fn solve_lq_hamiltonian_system(
    c: &LqCoefficients,
    terminal: Terminal,
    paths: &DriverPaths,
    cfg: &SolveConfig,
    cont: &ContinuationConfig,
) -> Result<LqHamiltonianSolution> {
    let spec = lq_hamiltonian_spec(c, terminal)?;
    let (solution, state) = continuation_solve(&spec, paths, cfg, cont, None)?;
    let (control, mean_control_gap) = lq_control_from(c, &solution);
    Ok(LqHamiltonianSolution { solution, state, control, mean_control_gap })
}
