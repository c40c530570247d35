//! Empirical laws, Wasserstein-2 distances and mean-field coefficients.
//!
//! A [`MeanFieldFn`] is a map `(t, x, μ) -> R^m` of the structured form
//! `value(t, x, E[stat(X)]) + E[kernel(t, x, X)]`. The first term covers scalar
//! interactions and the linear (LQ) family, the second covers first-order
//! interactions. L-derivatives are evaluated in closed form from the pieces.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::parallel;

/// Largest support for which the exact assignment solver is used.
pub const DEFAULT_ASSIGNMENT_CAP: usize = 64;

/// Named contiguous blocks of a support point, e.g. `y`, `z`, `u`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub blocks: Vec<(String, usize)>,
}

impl Layout {
    pub fn new(blocks: &[(&str, usize)]) -> Self {
        Layout { blocks: blocks.iter().map(|(n, w)| (n.to_string(), *w)).collect() }
    }

    pub fn width(&self) -> usize {
        self.blocks.iter().map(|b| b.1).sum()
    }

    /// Column range of a named block.
    pub fn range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut off = 0;
        for (n, w) in &self.blocks {
            if n == name {
                return Some(off..off + w);
            }
            off += w;
        }
        None
    }
}

/// Uniformly weighted law on finitely many points sharing one layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalLaw {
    pub layout: Layout,
    /// Row-major `len x layout.width()`.
    pub points: Vec<f64>,
}

impl EmpiricalLaw {
    pub fn new(layout: Layout, points: Vec<f64>) -> Result<Self> {
        let w = layout.width();
        if w == 0 || points.is_empty() || points.len() % w != 0 {
            return Err(invalid("law needs a nonempty support matching its layout"));
        }
        Ok(EmpiricalLaw { layout, points })
    }

    /// One-block law over scalars.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(Layout::new(&[("x", 1)]), values.to_vec())
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.layout.width()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let w = self.layout.width();
        &self.points[i * w..(i + 1) * w]
    }

    /// Restriction to a subset of columns.
    pub fn marginal(&self, cols: &[usize]) -> Result<EmpiricalLaw> {
        if cols.is_empty() {
            return Err(invalid("empty coordinate selection"));
        }
        let mut pts = Vec::with_capacity(self.len() * cols.len());
        for i in 0..self.len() {
            let p = self.point(i);
            pts.extend(cols.iter().map(|&c| p[c]));
        }
        EmpiricalLaw::new(Layout::new(&[("x", cols.len())]), pts)
    }

    /// Write the support as CSV, one point per row.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| Error::Io { path: "<law csv>".into(), message: e.to_string() };
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = Vec::new();
        for (name, w) in &self.layout.blocks {
            for c in 0..*w {
                header.push(format!("{name}{c}"));
            }
        }
        wtr.write_record(&header).map_err(io)?;
        for i in 0..self.len() {
            wtr.write_record(self.point(i).iter().map(|v| format!("{v:e}"))).map_err(io)?;
        }
        wtr.flush().map_err(|e| Error::Io { path: "<law csv>".into(), message: e.to_string() })
    }
}

/// Which coordinates a moment refers to.
#[derive(Debug, Clone, PartialEq)]
pub enum Selector {
    Block(String),
    Columns(Vec<usize>),
}

impl Selector {
    fn columns(&self, layout: &Layout) -> Result<Vec<usize>> {
        let cols: Vec<usize> = match self {
            Selector::Block(name) => layout
                .range(name)
                .ok_or_else(|| invalid(format!("unknown block {name}")))?
                .collect(),
            Selector::Columns(c) => c.clone(),
        };
        if cols.is_empty() {
            return Err(invalid("empty coordinate selection"));
        }
        if cols.iter().any(|&c| c >= layout.width()) {
            return Err(invalid("column index outside the layout"));
        }
        Ok(cols)
    }
}

/// Mean vector of the selected coordinates.
pub fn moments(law: &EmpiricalLaw, which: &Selector) -> Result<Vec<f64>> {
    let cols = which.columns(&law.layout)?;
    let s = parallel::vec_sum_by(law.len(), cols.len(), |i, acc| {
        let p = law.point(i);
        for (a, &c) in acc.iter_mut().zip(&cols) {
            *a += p[c];
        }
    });
    Ok(s.into_iter().map(|v| v / law.len() as f64).collect())
}

/// Matrix of second moments `E[x_a x_b]`, row-major over the selection.
pub fn second_moments(law: &EmpiricalLaw, which: &Selector) -> Result<Vec<f64>> {
    let cols = which.columns(&law.layout)?;
    let k = cols.len();
    let s = parallel::vec_sum_by(law.len(), k * k, |i, acc| {
        let p = law.point(i);
        for a in 0..k {
            for b in 0..k {
                acc[a * k + b] += p[cols[a]] * p[cols[b]];
            }
        }
    });
    Ok(s.into_iter().map(|v| v / law.len() as f64).collect())
}

/// Uniform average of `phi` over the support.
pub fn scalar_functional<F: Fn(&[f64]) -> f64 + Sync>(law: &EmpiricalLaw, phi: F) -> f64 {
    parallel::sum_by(law.len(), |i| phi(law.point(i))) / law.len() as f64
}

/// `Ẽ[k(x, X̃)]` over the law.
pub fn pairwise_average<F: Fn(&[f64], &[f64]) -> f64 + Sync>(law: &EmpiricalLaw, kernel: F, x: &[f64]) -> f64 {
    parallel::sum_by(law.len(), |i| kernel(x, law.point(i))) / law.len() as f64
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method).
/// Returns `assign[row] = column`.
pub fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Exact W2 between two uniform laws of equal size.
///
/// One-dimensional laws use the sorted pairing; otherwise the exact assignment
/// is solved for supports up to `cap` points.
pub fn wasserstein2(a: &EmpiricalLaw, b: &EmpiricalLaw, cap: usize) -> Result<f64> {
    if a.layout.width() != b.layout.width() {
        return Err(invalid("laws have different layouts"));
    }
    if a.len() != b.len() {
        return Err(invalid("laws have different support sizes"));
    }
    let n = a.len();
    if a.layout.width() == 1 {
        return Ok(sorted_w2(&a.points, &b.points));
    }
    if n > cap {
        return Err(Error::Capacity(format!("support of {n} points exceeds the assignment cap {cap}")));
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = sq_dist(a.point(i), b.point(j));
        }
    }
    let assign = assignment(&cost, n);
    let total: f64 = (0..n).map(|i| cost[i * n + assign[i]]).sum();
    Ok((total / n as f64).max(0.0).sqrt())
}

fn sorted_w2(a: &[f64], b: &[f64]) -> f64 {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    (sq_dist(&x, &y) / x.len() as f64).sqrt()
}

/// Diagnostic only: root of the summed per-coordinate one-dimensional W2².
/// This is a lower bound for the exact W2 and is used for large supports.
pub fn wasserstein2_projected(a: &EmpiricalLaw, b: &EmpiricalLaw) -> Result<f64> {
    if a.layout.width() != b.layout.width() || a.len() != b.len() {
        return Err(invalid("laws have different shapes"));
    }
    let w = a.layout.width();
    let mut total = 0.0;
    for c in 0..w {
        let x: Vec<f64> = (0..a.len()).map(|i| a.point(i)[c]).collect();
        let y: Vec<f64> = (0..b.len()).map(|i| b.point(i)[c]).collect();
        total += sorted_w2(&x, &y).powi(2);
    }
    Ok(total.sqrt())
}

/// Root-mean-square distance under the identity coupling; an upper bound for W2.
pub fn identity_coupling_distance(a: &[f64], b: &[f64], width: usize) -> f64 {
    let rows = a.len() / width.max(1);
    if rows == 0 {
        return 0.0;
    }
    (parallel::sum_by(rows, |i| sq_dist(&a[i * width..(i + 1) * width], &b[i * width..(i + 1) * width]))
        / rows as f64)
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InteractionKind {
    None,
    Scalar,
    FirstOrder,
    LinearLq,
}

/// Coefficient of the form `value(t, x, E[stat(X)]) + E[kernel(t, x, X)]`.
///
/// Jacobians are row-major: `jac_x` is `out_dim x in_dim`, `jac_s` is
/// `out_dim x stat_dim`, `stat_jac` is `stat_dim x in_dim`.
pub trait MeanFieldFn: Send + Sync {
    fn kind(&self) -> InteractionKind;
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    fn stat_dim(&self) -> usize {
        0
    }
    fn stat(&self, _x: &[f64], _out: &mut [f64]) {}
    fn stat_jac(&self, _x: &[f64], _out: &mut [f64]) {}
    fn value(&self, t: f64, x: &[f64], s: &[f64], out: &mut [f64]);
    fn jac_x(&self, t: f64, x: &[f64], s: &[f64], out: &mut [f64]);
    fn jac_s(&self, _t: f64, _x: &[f64], _s: &[f64], _out: &mut [f64]) {}
    fn has_kernel(&self) -> bool {
        false
    }
    fn kernel(&self, _t: f64, _x: &[f64], _xt: &[f64], _out: &mut [f64]) {}
    fn kernel_jac_x(&self, _t: f64, _x: &[f64], _xt: &[f64], _out: &mut [f64]) {}
    fn kernel_jac_xt(&self, _t: f64, _x: &[f64], _xt: &[f64], _out: &mut [f64]) {}
}

/// Scalar statistics `E[stat(X)]` of a coefficient over a set of points.
pub fn statistics(c: &dyn MeanFieldFn, points: &[f64]) -> Vec<f64> {
    let r = c.stat_dim();
    let d = c.in_dim();
    if r == 0 || points.is_empty() {
        return vec![0.0; r];
    }
    let rows = points.len() / d;
    let s = parallel::vec_sum_by(rows, r, |i, acc| {
        let mut tmp = vec![0.0; r];
        c.stat(&points[i * d..(i + 1) * d], &mut tmp);
        for (a, v) in acc.iter_mut().zip(&tmp) {
            *a += v;
        }
    });
    s.into_iter().map(|v| v / rows as f64).collect()
}

/// Full value at `x` against the law given by `points` (statistics precomputed).
pub fn evaluate(c: &dyn MeanFieldFn, t: f64, x: &[f64], stats: &[f64], points: &[f64], out: &mut [f64]) {
    c.value(t, x, stats, out);
    if c.has_kernel() {
        let d = c.in_dim();
        let rows = points.len() / d;
        let m = c.out_dim();
        let mut acc = vec![0.0; m];
        let mut tmp = vec![0.0; m];
        for j in 0..rows {
            c.kernel(t, x, &points[j * d..(j + 1) * d], &mut tmp);
            for (a, v) in acc.iter_mut().zip(&tmp) {
                *a += v;
            }
        }
        for (o, a) in out.iter_mut().zip(&acc) {
            *o += a / rows as f64;
        }
    }
}

/// Jacobian in `x` at fixed law, including the kernel's first-slot derivative.
pub fn jacobian_x(c: &dyn MeanFieldFn, t: f64, x: &[f64], stats: &[f64], points: &[f64], out: &mut [f64]) {
    c.jac_x(t, x, stats, out);
    if c.has_kernel() {
        let d = c.in_dim();
        let rows = points.len() / d;
        let mut tmp = vec![0.0; out.len()];
        let mut acc = vec![0.0; out.len()];
        for j in 0..rows {
            c.kernel_jac_x(t, x, &points[j * d..(j + 1) * d], &mut tmp);
            for (a, v) in acc.iter_mut().zip(&tmp) {
                *a += v;
            }
        }
        for (o, a) in out.iter_mut().zip(&acc) {
            *o += a / rows as f64;
        }
    }
}

/// L-derivative `∂_μ c(t, base, μ)(eval)` as an `out_dim x in_dim` matrix.
/// Column blocks of the result give `∂_{μ_y}`, `∂_{μ_z}`, `∂_{μ_u}`.
pub fn l_derivative_full(c: &dyn MeanFieldFn, t: f64, base: &[f64], stats: &[f64], eval: &[f64]) -> Result<Vec<f64>> {
    let m = c.out_dim();
    let d = c.in_dim();
    let r = c.stat_dim();
    let mut out = vec![0.0; m * d];
    match c.kind() {
        InteractionKind::None => {
            return Err(Error::Unsupported("L-derivative of a coefficient without measure dependence".into()))
        }
        _ => {
            if r > 0 {
                let mut js = vec![0.0; m * r];
                c.jac_s(t, base, stats, &mut js);
                let mut sj = vec![0.0; r * d];
                c.stat_jac(eval, &mut sj);
                for a in 0..m {
                    for b in 0..d {
                        out[a * d + b] = (0..r).map(|k| js[a * r + k] * sj[k * d + b]).sum();
                    }
                }
            }
            if c.has_kernel() {
                let mut kj = vec![0.0; m * d];
                c.kernel_jac_xt(t, base, eval, &mut kj);
                for (o, v) in out.iter_mut().zip(&kj) {
                    *o += v;
                }
            }
        }
    }
    Ok(out)
}

/// L-derivative restricted to a column block (`which` is a range of input columns).
pub fn l_derivative(
    c: &dyn MeanFieldFn,
    which: std::ops::Range<usize>,
    t: f64,
    base: &[f64],
    law: &EmpiricalLaw,
    eval: &[f64],
) -> Result<Vec<f64>> {
    let stats = statistics(c, &law.points);
    let full = l_derivative_full(c, t, base, &stats, eval)?;
    let d = c.in_dim();
    let mut out = Vec::with_capacity(c.out_dim() * which.len());
    for a in 0..c.out_dim() {
        out.extend_from_slice(&full[a * d + which.start..a * d + which.end]);
    }
    Ok(out)
}

/// `A x + Ā E[x] + offset` with constant matrices (the linear family).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMeanField {
    pub in_dim: usize,
    pub out_dim: usize,
    pub a: Vec<f64>,
    pub abar: Vec<f64>,
    pub offset: Vec<f64>,
}

impl LinearMeanField {
    pub fn new(in_dim: usize, out_dim: usize, a: Vec<f64>, abar: Vec<f64>) -> Self {
        assert_eq!(a.len(), in_dim * out_dim);
        assert_eq!(abar.len(), in_dim * out_dim);
        LinearMeanField { in_dim, out_dim, a, abar, offset: vec![0.0; out_dim] }
    }

    pub fn zero(in_dim: usize, out_dim: usize) -> Self {
        Self::new(in_dim, out_dim, vec![0.0; in_dim * out_dim], vec![0.0; in_dim * out_dim])
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Self {
        assert_eq!(offset.len(), self.out_dim);
        self.offset = offset;
        self
    }
}

impl MeanFieldFn for LinearMeanField {
    fn kind(&self) -> InteractionKind {
        InteractionKind::LinearLq
    }
    fn in_dim(&self) -> usize {
        self.in_dim
    }
    fn out_dim(&self) -> usize {
        self.out_dim
    }
    fn stat_dim(&self) -> usize {
        self.in_dim
    }
    fn stat(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
    fn stat_jac(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.in_dim {
            out[i * self.in_dim + i] = 1.0;
        }
    }
    fn value(&self, _t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        let d = self.in_dim;
        for (a, o) in out.iter_mut().enumerate() {
            let row = &self.a[a * d..(a + 1) * d];
            let rowb = &self.abar[a * d..(a + 1) * d];
            *o = self.offset[a]
                + row.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
                + rowb.iter().zip(s).map(|(c, v)| c * v).sum::<f64>();
        }
    }
    fn jac_x(&self, _t: f64, _x: &[f64], _s: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.a);
    }
    fn jac_s(&self, _t: f64, _x: &[f64], _s: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.abar);
    }
}

/// `½ xᵀ Q x + ½ E[x]ᵀ Q̄ E[x]` with symmetric `Q`, `Q̄` (the LQ running and terminal costs).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticMeanField {
    pub dim: usize,
    pub q: Vec<f64>,
    pub qbar: Vec<f64>,
}

impl QuadraticMeanField {
    pub fn diagonal(q: &[f64], qbar: &[f64]) -> Self {
        let d = q.len();
        let mut qm = vec![0.0; d * d];
        let mut qb = vec![0.0; d * d];
        for i in 0..d {
            qm[i * d + i] = q[i];
            qb[i * d + i] = qbar[i];
        }
        QuadraticMeanField { dim: d, q: qm, qbar: qb }
    }

    fn quad(&self, m: &[f64], x: &[f64]) -> f64 {
        let d = self.dim;
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += x[i] * m[i * d + j] * x[j];
            }
        }
        0.5 * s
    }

    fn grad(&self, m: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            out[i] = (0..d).map(|j| m[i * d + j] * x[j]).sum();
        }
    }
}

impl MeanFieldFn for QuadraticMeanField {
    fn kind(&self) -> InteractionKind {
        InteractionKind::LinearLq
    }
    fn in_dim(&self) -> usize {
        self.dim
    }
    fn out_dim(&self) -> usize {
        1
    }
    fn stat_dim(&self) -> usize {
        self.dim
    }
    fn stat(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
    fn stat_jac(&self, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = 1.0;
        }
    }
    fn value(&self, _t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        out[0] = self.quad(&self.q, x) + self.quad(&self.qbar, s);
    }
    fn jac_x(&self, _t: f64, x: &[f64], _s: &[f64], out: &mut [f64]) {
        self.grad(&self.q, x, out);
    }
    fn jac_s(&self, _t: f64, _x: &[f64], s: &[f64], out: &mut [f64]) {
        self.grad(&self.qbar, s, out);
    }
}

type StatFn = Box<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
type OuterFn = Box<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Scalar interaction `outer(t, x, E[stat(X)])` built from closures.
pub struct ScalarInteraction {
    pub in_dim: usize,
    pub out_dim: usize,
    pub stat_dim: usize,
    pub stat: StatFn,
    pub stat_jac: StatFn,
    pub value: OuterFn,
    pub jac_x: OuterFn,
    pub jac_s: OuterFn,
}

impl MeanFieldFn for ScalarInteraction {
    fn kind(&self) -> InteractionKind {
        InteractionKind::Scalar
    }
    fn in_dim(&self) -> usize {
        self.in_dim
    }
    fn out_dim(&self) -> usize {
        self.out_dim
    }
    fn stat_dim(&self) -> usize {
        self.stat_dim
    }
    fn stat(&self, x: &[f64], out: &mut [f64]) {
        (self.stat)(x, out)
    }
    fn stat_jac(&self, x: &[f64], out: &mut [f64]) {
        (self.stat_jac)(x, out)
    }
    fn value(&self, t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        (self.value)(t, x, s, out)
    }
    fn jac_x(&self, t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        (self.jac_x)(t, x, s, out)
    }
    fn jac_s(&self, t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        (self.jac_s)(t, x, s, out)
    }
}

/// First-order interaction `E[kernel(t, x, X)]` built from closures.
pub struct FirstOrderInteraction {
    pub in_dim: usize,
    pub out_dim: usize,
    pub kernel: OuterFn,
    pub kernel_jac_x: OuterFn,
    pub kernel_jac_xt: OuterFn,
}

impl MeanFieldFn for FirstOrderInteraction {
    fn kind(&self) -> InteractionKind {
        InteractionKind::FirstOrder
    }
    fn in_dim(&self) -> usize {
        self.in_dim
    }
    fn out_dim(&self) -> usize {
        self.out_dim
    }
    fn value(&self, _t: f64, _x: &[f64], _s: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn jac_x(&self, _t: f64, _x: &[f64], _s: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn has_kernel(&self) -> bool {
        true
    }
    fn kernel(&self, t: f64, x: &[f64], xt: &[f64], out: &mut [f64]) {
        (self.kernel)(t, x, xt, out)
    }
    fn kernel_jac_x(&self, t: f64, x: &[f64], xt: &[f64], out: &mut [f64]) {
        (self.kernel_jac_x)(t, x, xt, out)
    }
    fn kernel_jac_xt(&self, t: f64, x: &[f64], xt: &[f64], out: &mut [f64]) {
        (self.kernel_jac_xt)(t, x, xt, out)
    }
}

/// Local coefficient with no measure dependence, from closures.
pub struct LocalFn {
    pub in_dim: usize,
    pub out_dim: usize,
    pub value: OuterFn,
    pub jac_x: OuterFn,
}

impl MeanFieldFn for LocalFn {
    fn kind(&self) -> InteractionKind {
        InteractionKind::None
    }
    fn in_dim(&self) -> usize {
        self.in_dim
    }
    fn out_dim(&self) -> usize {
        self.out_dim
    }
    fn value(&self, t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        (self.value)(t, x, s, out)
    }
    fn jac_x(&self, t: f64, x: &[f64], s: &[f64], out: &mut [f64]) {
        (self.jac_x)(t, x, s, out)
    }
}

/// Estimated constants of the smallness conditions on the backward diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBounds {
    /// Sup over probes of the Frobenius norm of `∂_z g`.
    pub alpha1: f64,
    /// Sup over probes of `∫ ‖∂_{μ_z} g(x, μ)(x')‖² dμ(x')`.
    pub alpha2: f64,
    /// Sup of the Frobenius norms of every other partial seen on the probes.
    pub other_partials: f64,
    pub pass: bool,
    pub failures: Vec<String>,
}

/// Estimate `alpha1`, `alpha2` of the backward diffusion `g` over a probe law.
/// `z_cols` are the input columns holding `z`.
pub fn validate_coefficient_bounds(
    g: &dyn MeanFieldFn,
    z_cols: std::ops::Range<usize>,
    probe: &EmpiricalLaw,
    t: f64,
) -> CoefficientBounds {
    let d = g.in_dim();
    let m = g.out_dim();
    let stats = statistics(g, &probe.points);
    let mut alpha1: f64 = 0.0;
    let mut alpha2: f64 = 0.0;
    let mut other: f64 = 0.0;
    let mut jac = vec![0.0; m * d];
    for i in 0..probe.len() {
        let x = probe.point(i);
        jacobian_x(g, t, x, &stats, &probe.points, &mut jac);
        let mut zn = 0.0;
        let mut on = 0.0;
        for a in 0..m {
            for b in 0..d {
                let v = jac[a * d + b];
                if z_cols.contains(&b) {
                    zn += v * v;
                } else {
                    on += v * v;
                }
            }
        }
        alpha1 = alpha1.max(zn.sqrt());
        other = other.max(on.sqrt());
        if g.kind() != InteractionKind::None {
            let mut acc = 0.0;
            for j in 0..probe.len() {
                if let Ok(ld) = l_derivative_full(g, t, x, &stats, probe.point(j)) {
                    for a in 0..m {
                        for b in z_cols.clone() {
                            acc += ld[a * d + b].powi(2);
                        }
                    }
                }
            }
            alpha2 = alpha2.max(acc / probe.len() as f64);
        }
    }
    let mut failures = Vec::new();
    if !(alpha1 < 1.0) {
        failures.push(format!("H1: alpha1 = {alpha1} >= 1"));
    }
    if !(alpha1 + alpha2 < 1.0) {
        failures.push(format!("H2: alpha1 + alpha2 = {} >= 1", alpha1 + alpha2));
    }
    if !other.is_finite() {
        failures.push("H1: unbounded partial derivative on the probe sample".into());
    }
    CoefficientBounds { alpha1, alpha2, other_partials: other, pass: failures.is_empty(), failures }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moment_examples() {
        let l = EmpiricalLaw::scalar(&[1.0, -1.0]).unwrap();
        assert_eq!(moments(&l, &Selector::Block("x".into())).unwrap(), vec![0.0]);
        assert_eq!(second_moments(&l, &Selector::Columns(vec![0])).unwrap(), vec![1.0]);
        let l = EmpiricalLaw::scalar(&[0.0, 2.0, 4.0]).unwrap();
        assert_eq!(moments(&l, &Selector::Columns(vec![0])).unwrap(), vec![2.0]);
        assert!(moments(&l, &Selector::Columns(vec![])).is_err());
    }

    #[test]
    fn w2_examples() {
        let a = EmpiricalLaw::scalar(&[0.0, 2.0]).unwrap();
        let b = EmpiricalLaw::scalar(&[1.0, 3.0]).unwrap();
        assert_eq!(wasserstein2(&a, &a, 64).unwrap(), 0.0);
        let z = EmpiricalLaw::scalar(&[0.0]).unwrap();
        let o = EmpiricalLaw::scalar(&[1.0]).unwrap();
        assert_eq!(wasserstein2(&z, &o, 64).unwrap(), 1.0);
        // Monotone pairing sqrt((1+1)/2) beats the crossed pairing sqrt((9+1)/2).
        assert_eq!(wasserstein2(&a, &b, 64).unwrap(), 1.0);
    }

    #[test]
    fn w2_capacity_and_layout_errors() {
        let lay = Layout::new(&[("y", 2)]);
        let a = EmpiricalLaw::new(lay.clone(), vec![0.0; 2 * 70]).unwrap();
        assert!(matches!(wasserstein2(&a, &a, 64), Err(Error::Capacity(_))));
        let s = EmpiricalLaw::scalar(&[0.0; 70]).unwrap();
        assert!(matches!(wasserstein2(&a, &s, 64), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn functional_examples() {
        let l = EmpiricalLaw::scalar(&[1.0, -1.0]).unwrap();
        assert_eq!(scalar_functional(&l, |x| x[0] * x[0]), 1.0);
        assert_eq!(scalar_functional(&l, |_| 3.5), 3.5);
        let l = EmpiricalLaw::scalar(&[0.0, 2.0, 4.0]).unwrap();
        assert_eq!(scalar_functional(&l, |x| x[0]), 2.0);
        let l = EmpiricalLaw::scalar(&[1.0, 3.0]).unwrap();
        assert_eq!(pairwise_average(&l, |x, y| x[0] * y[0], &[2.0]), 4.0);
        assert_eq!(pairwise_average(&l, |x, _| x[0] + 1.0, &[2.0]), 3.0);
    }

    fn scalar_r_times_y_squared() -> ScalarInteraction {
        ScalarInteraction {
            in_dim: 1,
            out_dim: 1,
            stat_dim: 1,
            stat: Box::new(|x, o| o[0] = x[0] * x[0]),
            stat_jac: Box::new(|x, o| o[0] = 2.0 * x[0]),
            value: Box::new(|_, _, s, o| o[0] = s[0]),
            jac_x: Box::new(|_, _, _, o| o[0] = 0.0),
            jac_s: Box::new(|_, _, _, o| o[0] = 1.0),
        }
    }

    #[test]
    fn l_derivative_examples() {
        let law = EmpiricalLaw::scalar(&[1.0, 2.0]).unwrap();
        let f = scalar_r_times_y_squared();
        assert_eq!(l_derivative(&f, 0..1, 0.0, &[0.5], &law, &[3.0]).unwrap(), vec![6.0]);

        let k = FirstOrderInteraction {
            in_dim: 1,
            out_dim: 1,
            kernel: Box::new(|_, _, xt, o| o[0] = xt[0] * xt[0]),
            kernel_jac_x: Box::new(|_, _, _, o| o[0] = 0.0),
            kernel_jac_xt: Box::new(|_, _, xt, o| o[0] = 2.0 * xt[0]),
        };
        assert_eq!(l_derivative(&k, 0..1, 0.0, &[0.5], &law, &[3.0]).unwrap(), vec![6.0]);

        // f = f1 y + fbar1 E[y] over (y, z, u).
        let lin = LinearMeanField::new(3, 1, vec![1.0, 0.0, 0.0], vec![0.7, 0.0, 0.0]);
        let law3 = EmpiricalLaw::new(Layout::new(&[("y", 1), ("z", 1), ("u", 1)]), vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(l_derivative(&lin, 0..1, 0.0, &[0.0; 3], &law3, &[5.0, 1.0, 1.0]).unwrap(), vec![0.7]);

        let local = LocalFn {
            in_dim: 1,
            out_dim: 1,
            value: Box::new(|_, x, _, o| o[0] = x[0]),
            jac_x: Box::new(|_, _, _, o| o[0] = 1.0),
        };
        assert!(matches!(l_derivative(&local, 0..1, 0.0, &[0.0], &law, &[1.0]), Err(Error::Unsupported(_))));
    }

    #[test]
    fn bounds_examples() {
        let lay = Layout::new(&[("y", 1), ("z", 1), ("u", 1)]);
        let probe = EmpiricalLaw::new(lay, vec![0.1, -0.4, 1.0, 2.0, 0.3, -1.0]).unwrap();
        let half = LinearMeanField::new(3, 1, vec![0.0, 0.5, 0.0], vec![0.0; 3]);
        let b = validate_coefficient_bounds(&half, 1..2, &probe, 0.0);
        assert_eq!(b.alpha1, 0.5);
        assert!(b.pass);
        let one = LinearMeanField::new(3, 1, vec![0.0, 1.0, 0.0], vec![0.0; 3]);
        let b = validate_coefficient_bounds(&one, 1..2, &probe, 0.0);
        assert_eq!(b.alpha1, 1.0);
        assert!(!b.pass);
        let lq = LinearMeanField::new(3, 1, vec![0.2, 0.3, 0.1], vec![0.1, 0.3, 0.0]);
        let b = validate_coefficient_bounds(&lq, 1..2, &probe, 0.0);
        assert!(b.pass, "{b:?}");
        assert!((b.alpha2 - 0.09).abs() < 1e-15);
    }
}
