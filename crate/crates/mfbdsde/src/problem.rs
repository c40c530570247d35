//! Control problems: coefficients, terminal data, admissible boxes and controls.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bdsde::{self, BdsdeModel, Dims, EnsembleSolution, SolveConfig, StepView};
use crate::drivers::DriverPaths;
use crate::error::{invalid, Result};
use crate::law::{
    evaluate, statistics, validate_coefficient_bounds, CoefficientBounds, EmpiricalLaw, InteractionKind, Layout,
    LinearMeanField, MeanFieldFn, QuadraticMeanField,
};
use crate::parallel;

/// Coordinate box `U = Π [lower_j, upper_j]`; bounds may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn whole_space(k: usize) -> Self {
        BoxSet { lower: vec![f64::NEG_INFINITY; k], upper: vec![f64::INFINITY; k] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(invalid("box bounds have different lengths"));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l.is_nan() || u.is_nan() || l > u) {
            return Err(invalid("box bounds are not ordered"));
        }
        Ok(())
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter().enumerate().all(|(j, v)| *v >= self.lower[j] && *v <= self.upper[j])
    }

    /// Coordinate-wise clipping.
    pub fn project(&self, u: &mut [f64]) {
        for (j, v) in u.iter_mut().enumerate() {
            *v = v.max(self.lower[j]).min(self.upper[j]);
        }
    }
}

/// Per-step, per-particle control values: `values[i]` is `N x k` for step `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    pub k: usize,
    pub values: Vec<Vec<f64>>,
}

impl Control {
    pub fn constant(n_steps: usize, n_particles: usize, value: &[f64]) -> Self {
        let row: Vec<f64> = (0..n_particles).flat_map(|_| value.iter().copied()).collect();
        Control { k: value.len(), values: vec![row; n_steps] }
    }

    pub fn n_steps(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, step: usize, p: usize) -> &[f64] {
        &self.values[step][p * self.k..(p + 1) * self.k]
    }

    /// `self + eps * dir`.
    pub fn axpy(&self, eps: f64, dir: &Control) -> Control {
        let values = self
            .values
            .iter()
            .zip(&dir.values)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + eps * y).collect())
            .collect();
        Control { k: self.k, values }
    }

    pub fn project(&mut self, set: &BoxSet) {
        for v in &mut self.values {
            for row in v.chunks_mut(self.k) {
                set.project(row);
            }
        }
    }

    pub fn is_admissible(&self, set: &BoxSet) -> bool {
        self.values.iter().all(|v| v.chunks(self.k).all(|r| set.contains(r)))
    }
}

type TerminalFn = Arc<dyn Fn(&DriverPaths, usize, &mut [f64]) + Send + Sync>;

/// Terminal datum `ξ`, a functional of the W path.
#[derive(Clone)]
pub enum Terminal {
    Constant(Vec<f64>),
    /// `ξ = offset + slope W_T` with `slope` row-major `n x l`.
    AffineW { offset: Vec<f64>, slope: Vec<f64> },
    Custom(TerminalFn),
}

impl std::fmt::Debug for Terminal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Terminal::Constant(c) => write!(f, "Constant({c:?})"),
            Terminal::AffineW { offset, slope } => write!(f, "AffineW({offset:?}, {slope:?})"),
            Terminal::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Terminal {
    pub fn fill(&self, n: usize, paths: &DriverPaths, out: &mut [f64]) -> Result<()> {
        let steps = paths.n_steps();
        let l = paths.w_dim;
        match self {
            Terminal::Constant(c) => {
                if c.len() != n {
                    return Err(invalid("terminal constant has the wrong dimension"));
                }
                for row in out.chunks_mut(n) {
                    row.copy_from_slice(c);
                }
            }
            Terminal::AffineW { offset, slope } => {
                if offset.len() != n || slope.len() != n * l {
                    return Err(invalid("affine terminal datum has the wrong shape"));
                }
                parallel::fill_rows(out, n, |p, row| {
                    let w = paths.w_value(p, steps);
                    for r in 0..n {
                        row[r] = offset[r] + (0..l).map(|c| slope[r * l + c] * w[c]).sum::<f64>();
                    }
                });
            }
            Terminal::Custom(func) => parallel::fill_rows(out, n, |p, row| func(paths, p, row)),
        }
        Ok(())
    }
}

/// Full coefficient package of a mean-field control problem.
///
/// `f`, `g`, `h` act on `x = (y, z, u)` of width `n + nl + k` and return
/// `n`, `nd` and `1` values; `phi` acts on `y` and returns one value.
#[derive(Clone)]
pub struct ProblemSpec {
    pub dims: Dims,
    pub k: usize,
    pub f: Arc<dyn MeanFieldFn>,
    pub g: Arc<dyn MeanFieldFn>,
    pub h: Arc<dyn MeanFieldFn>,
    pub phi: Arc<dyn MeanFieldFn>,
    pub terminal: Terminal,
    pub admissible: BoxSet,
}

impl std::fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("dims", &self.dims)
            .field("k", &self.k)
            .field("kind", &self.kind())
            .field("terminal", &self.terminal)
            .finish()
    }
}

/// Scalar LQ constants (`n = l = d = k = 1`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqCoefficients {
    pub f: [f64; 3],
    pub fbar: [f64; 3],
    pub g: [f64; 3],
    pub gbar: [f64; 3],
    pub h: [f64; 3],
    pub hbar: [f64; 3],
    pub phi: f64,
    pub phibar: f64,
}

impl LqCoefficients {
    /// Sign and smallness constraints of the LQ model.
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("h1", self.h[0]),
            ("h2", self.h[1]),
            ("hbar1", self.hbar[0]),
            ("hbar2", self.hbar[1]),
            ("phi", self.phi),
            ("phibar", self.phibar),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) {
                return Err(crate::Error::Config(format!("LQ constraint violated: {name} >= 0")));
            }
        }
        if !(self.h[2] > 0.0) {
            return Err(crate::Error::Config("LQ constraint violated: h3 > 0".into()));
        }
        if !(self.hbar[2] >= 0.0) {
            return Err(crate::Error::Config("LQ constraint violated: hbar3 >= 0".into()));
        }
        if !(self.g[1].abs() + self.gbar[1].abs() < 1.0) {
            return Err(crate::Error::Config("LQ constraint violated: |g2| + |gbar2| < 1".into()));
        }
        Ok(())
    }

    /// Whether any coefficient couples the law of the control.
    pub fn has_mean_control(&self) -> bool {
        self.fbar[2] != 0.0 || self.gbar[2] != 0.0 || self.hbar[2] != 0.0
    }
}

impl ProblemSpec {
    /// Scalar LQ problem with terminal datum `terminal` and admissible set `admissible`.
    pub fn lq(c: &LqCoefficients, terminal: Terminal, admissible: BoxSet) -> Self {
        ProblemSpec {
            dims: Dims { n: 1, l: 1, d: 1 },
            k: 1,
            f: Arc::new(LinearMeanField::new(3, 1, c.f.to_vec(), c.fbar.to_vec())),
            g: Arc::new(LinearMeanField::new(3, 1, c.g.to_vec(), c.gbar.to_vec())),
            h: Arc::new(QuadraticMeanField::diagonal(&c.h, &c.hbar)),
            phi: Arc::new(QuadraticMeanField::diagonal(&[c.phi], &[c.phibar])),
            terminal,
            admissible,
        }
    }

    pub fn x_width(&self) -> usize {
        self.dims.n + self.dims.z_width() + self.k
    }

    /// Interaction kind of the dynamics (the most general among `f`, `g`).
    pub fn kind(&self) -> InteractionKind {
        let kinds = [self.f.kind(), self.g.kind(), self.h.kind()];
        if kinds.contains(&InteractionKind::FirstOrder) {
            InteractionKind::FirstOrder
        } else if kinds.contains(&InteractionKind::Scalar) {
            InteractionKind::Scalar
        } else if kinds.contains(&InteractionKind::LinearLq) {
            InteractionKind::LinearLq
        } else {
            InteractionKind::None
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.admissible.validate()?;
        let x = self.x_width();
        let n = self.dims.n;
        let checks = [
            ("f", &self.f, x, n),
            ("g", &self.g, x, self.dims.g_width()),
            ("h", &self.h, x, 1),
            ("phi", &self.phi, n, 1),
        ];
        for (name, c, i, o) in checks {
            if c.in_dim() != i || c.out_dim() != o {
                return Err(invalid(format!("{name} maps R^{} to R^{}, expected R^{i} to R^{o}", c.in_dim(), c.out_dim())));
            }
        }
        if self.admissible.dim() != self.k {
            return Err(invalid("admissible box has the wrong dimension"));
        }
        Ok(())
    }

    /// Estimate the smallness constants of `g` on a probe law over `(y, z, u)`.
    pub fn coefficient_bounds(&self, probe: &EmpiricalLaw) -> CoefficientBounds {
        let z0 = self.dims.n;
        validate_coefficient_bounds(self.g.as_ref(), z0..z0 + self.dims.z_width(), probe, 0.0)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&[("y", self.dims.n), ("z", self.dims.z_width()), ("u", self.k)])
    }
}

/// Rows `(y, z, u)` for every particle.
pub(crate) fn stack_rows(y: &[f64], z: &[f64], u: &[f64], n: usize, nz: usize, k: usize) -> Vec<f64> {
    let rows = y.len() / n;
    let w = n + nz + k;
    let mut out = vec![0.0; rows * w];
    parallel::fill_rows(&mut out, w, |p, row| {
        row[..n].copy_from_slice(&y[p * n..(p + 1) * n]);
        row[n..n + nz].copy_from_slice(&z[p * nz..(p + 1) * nz]);
        row[n + nz..].copy_from_slice(&u[p * k..(p + 1) * k]);
    });
    out
}

/// Evaluate a coefficient on every row against the law of `law_rows`.
pub(crate) fn eval_rows(c: &dyn MeanFieldFn, t: f64, rows: &[f64], law_rows: &[f64], out: &mut [f64]) {
    let stats = statistics(c, law_rows);
    let d = c.in_dim();
    parallel::fill_rows(out, c.out_dim(), |p, o| evaluate(c, t, &rows[p * d..(p + 1) * d], &stats, law_rows, o));
}

/// The state equation driven by a fixed control.
pub struct StateModel<'a> {
    pub spec: &'a ProblemSpec,
    pub control: &'a Control,
}

impl BdsdeModel for StateModel<'_> {
    fn dims(&self) -> Dims {
        self.spec.dims
    }

    fn mean_field(&self) -> bool {
        self.spec.f.kind() != InteractionKind::None || self.spec.g.kind() != InteractionKind::None
    }

    fn terminal(&self, paths: &DriverPaths, out: &mut [f64]) -> Result<()> {
        self.spec.terminal.fill(self.spec.dims.n, paths, out)
    }

    fn coefficients(&self, v: &StepView, f: &mut [f64], g: &mut [f64]) -> Result<()> {
        let s = self.spec;
        let (n, nz, k) = (s.dims.n, s.dims.z_width(), s.k);
        let u = &self.control.values[v.step];
        let rows = stack_rows(v.y, v.z, u, n, nz, k);
        let law = stack_rows(v.law_y, v.law_z, u, n, nz, k);
        eval_rows(s.f.as_ref(), v.t, &rows, &law, f);
        eval_rows(s.g.as_ref(), v.t, &rows, &law, g);
        Ok(())
    }
}

fn check_control(spec: &ProblemSpec, control: &Control, paths: &DriverPaths) -> Result<()> {
    spec.validate()?;
    if control.k != spec.k || control.n_steps() != paths.n_steps() {
        return Err(invalid("control shape does not match the problem"));
    }
    if control.values.iter().any(|v| v.len() != paths.n_particles * spec.k) {
        return Err(invalid("control rows do not match the ensemble"));
    }
    if !control.is_admissible(&spec.admissible) {
        return Err(invalid("control leaves the admissible set"));
    }
    Ok(())
}

/// Solve the state equation for control `u` with the regression scheme.
pub fn solve_mf_bdsde(spec: &ProblemSpec, u: &Control, paths: &DriverPaths, cfg: &SolveConfig) -> Result<EnsembleSolution> {
    check_control(spec, u, paths)?;
    bdsde::solve_model(&StateModel { spec, control: u }, paths, cfg)
}

/// Exact solve of the state equation on a full Bernoulli tree.
pub fn solve_on_tree(spec: &ProblemSpec, u: &Control, paths: &DriverPaths) -> Result<EnsembleSolution> {
    check_control(spec, u, paths)?;
    bdsde::solve_model_on_tree(&StateModel { spec, control: u }, paths, 1e-14)
}

/// Residual norms of the integrated state identity.
pub fn residual_check(sol: &EnsembleSolution, spec: &ProblemSpec, u: &Control, paths: &DriverPaths) -> Result<Vec<f64>> {
    bdsde::residual_check_model(&StateModel { spec, control: u }, sol, paths)
}
