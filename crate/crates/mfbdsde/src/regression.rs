//! Conditional expectations `E[· | W_{t_i}, B_T - B_{t_{i+1}}]` on an ensemble.
//!
//! Monte Carlo mode projects onto standardized polynomial features by ridge
//! least squares. Tree mode averages exactly over the leaves sharing a node.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::drivers::{DriverMode, DriverPaths};
use crate::error::{invalid, Error, Result};
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionMode {
    Montecarlo,
    TreeExact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    pub degree: usize,
    pub ridge: f64,
    pub mode: RegressionMode,
    /// Follow each state step with one Gauss-Seidel pass of the joint regression
    /// on the basis and the basis times `ΔW`. This removes most of the sampling
    /// noise of in-span martingale increments. The transposed estimator of the
    /// adjoint does not mirror it, so gradients are exact only without it.
    pub joint_refinement: bool,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig { degree: 2, ridge: 1e-10, mode: RegressionMode::Montecarlo, joint_refinement: false }
    }
}

impl RegressionConfig {
    pub fn tree() -> Self {
        RegressionConfig { mode: RegressionMode::TreeExact, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(invalid("ridge must be finite and nonnegative"));
        }
        Ok(())
    }
}

enum Kind {
    Poly { design: Vec<f64>, width: usize, gram: nalgebra::Cholesky<f64, nalgebra::Dyn> },
    Groups { ids: Vec<usize>, sizes: Vec<usize> },
}

/// Conditional-expectation operator for one time step, reusable across targets.
pub struct Projector {
    rows: usize,
    kind: Kind,
    refine: bool,
}

fn monomials(vars: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; vars]];
    let mut frontier = vec![vec![0; vars]];
    for _ in 0..degree {
        let mut next = Vec::new();
        for e in &frontier {
            // Only raise variables at or after the last raised one to avoid duplicates.
            let start = e.iter().rposition(|&k| k > 0).unwrap_or(0);
            for v in start..vars {
                let mut f = e.clone();
                f[v] += 1;
                next.push(f);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

impl Projector {
    /// Build the projector onto information at step `step` (`step < n_steps`).
    pub fn new(paths: &DriverPaths, step: usize, cfg: &RegressionConfig) -> Result<Self> {
        cfg.validate()?;
        let n = paths.n_steps();
        if step >= n {
            return Err(invalid(format!("step {step} outside 0..{n}")));
        }
        let mut p = match cfg.mode {
            RegressionMode::TreeExact => Self::tree(paths, step)?,
            RegressionMode::Montecarlo => Self::poly(paths, step, cfg)?,
        };
        p.refine = cfg.joint_refinement;
        Ok(p)
    }

    fn tree(paths: &DriverPaths, step: usize) -> Result<Self> {
        if paths.mode != DriverMode::BernoulliTree || !paths.is_full_tree() {
            return Err(invalid("tree-exact regression needs a fully enumerated Bernoulli tree"));
        }
        let n = paths.n_steps();
        let mut index: HashMap<Vec<bool>, usize> = HashMap::new();
        let mut ids = Vec::with_capacity(paths.n_particles);
        let mut sizes = Vec::new();
        for p in 0..paths.n_particles {
            let mut key = Vec::with_capacity(n * (paths.w_dim + paths.b_dim));
            for s in 0..step {
                key.extend(paths.w_increment(p, s).iter().map(|v| *v > 0.0));
            }
            for s in step + 1..n {
                key.extend(paths.b_increment(p, s).iter().map(|v| *v > 0.0));
            }
            let next = index.len();
            let id = *index.entry(key).or_insert(next);
            if id == sizes.len() {
                sizes.push(0);
            }
            sizes[id] += 1;
            ids.push(id);
        }
        Ok(Projector { rows: paths.n_particles, kind: Kind::Groups { ids, sizes }, refine: false })
    }

    fn poly(paths: &DriverPaths, step: usize, cfg: &RegressionConfig) -> Result<Self> {
        let n = paths.n_steps();
        let rows = paths.n_particles;
        let (l, d) = (paths.w_dim, paths.b_dim);
        // Raw features: W_{t_i} and B_T - B_{t_{i+1}}.
        let mut raw = vec![0.0; rows * (l + d)];
        parallel::fill_rows(&mut raw, l + d, |p, row| {
            for s in 0..step {
                for (r, v) in row[..l].iter_mut().zip(paths.w_increment(p, s)) {
                    *r += v;
                }
            }
            for s in step + 1..n {
                for (r, v) in row[l..].iter_mut().zip(paths.b_increment(p, s)) {
                    *r += v;
                }
            }
        });
        let means = parallel::column_means(&raw, l + d);
        let sq: Vec<f64> = raw
            .chunks(l + d)
            .flat_map(|r| r.iter().zip(&means).map(|(v, m)| (v - m) * (v - m)).collect::<Vec<_>>())
            .collect();
        let vars = parallel::column_means(&sq, l + d);
        let keep: Vec<usize> = (0..l + d).filter(|&c| vars[c] > 1e-24).collect();
        let exps = monomials(keep.len(), cfg.degree);
        let width = exps.len();
        let mut design = vec![0.0; rows * width];
        parallel::fill_rows(&mut design, width, |p, row| {
            let x: Vec<f64> =
                keep.iter().map(|&c| (raw[p * (l + d) + c] - means[c]) / vars[c].sqrt()).collect();
            for (slot, e) in row.iter_mut().zip(&exps) {
                *slot = e.iter().zip(&x).map(|(&k, v)| v.powi(k as i32)).product();
            }
        });
        let g = parallel::vec_sum_by(rows, width * width, |p, acc| {
            let r = &design[p * width..(p + 1) * width];
            for a in 0..width {
                for b in 0..width {
                    acc[a * width + b] += r[a] * r[b];
                }
            }
        });
        let mut gram = DMatrix::from_row_slice(width, width, &g);
        // The intercept (first monomial) is left unpenalized so constants are reproduced exactly.
        for a in 1..width {
            gram[(a, a)] += cfg.ridge;
        }
        let chol = gram.cholesky().ok_or_else(|| {
            Error::Numerical(format!(
                "rank-deficient regression at step {step} with {rows} particles; raise the ridge parameter"
            ))
        })?;
        Ok(Projector { rows, kind: Kind::Poly { design, width, gram: chol }, refine: false })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Whether state steps apply the joint-regression refinement.
    pub fn refines(&self) -> bool {
        self.refine
    }

    /// Project `targets` (`rows x width`, row-major) column by column.
    pub fn project(&self, targets: &[f64], width: usize) -> Result<Vec<f64>> {
        if targets.len() != self.rows * width {
            return Err(invalid("target array does not match the ensemble"));
        }
        if let Some(k) = targets.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite regression target at particle {}", k / width.max(1))));
        }
        if width == 0 {
            return Ok(Vec::new());
        }
        match &self.kind {
            Kind::Groups { ids, sizes } => {
                let mut sums = vec![0.0; sizes.len() * width];
                for (p, &g) in ids.iter().enumerate() {
                    for c in 0..width {
                        sums[g * width + c] += targets[p * width + c];
                    }
                }
                let mut out = vec![0.0; targets.len()];
                for (p, &g) in ids.iter().enumerate() {
                    for c in 0..width {
                        out[p * width + c] = sums[g * width + c] / sizes[g] as f64;
                    }
                }
                Ok(out)
            }
            Kind::Poly { design, width: f, gram } => {
                let f = *f;
                let rhs = parallel::vec_sum_by(self.rows, f * width, |p, acc| {
                    let x = &design[p * f..(p + 1) * f];
                    let y = &targets[p * width..(p + 1) * width];
                    for a in 0..f {
                        for c in 0..width {
                            acc[a * width + c] += x[a] * y[c];
                        }
                    }
                });
                let mut coef = vec![0.0; f * width];
                for c in 0..width {
                    let b = DVector::from_iterator(f, (0..f).map(|a| rhs[a * width + c]));
                    let s = gram.solve(&b);
                    for a in 0..f {
                        coef[a * width + c] = s[a];
                    }
                }
                let mut out = vec![0.0; targets.len()];
                parallel::fill_rows(&mut out, width, |p, row| {
                    let x = &design[p * f..(p + 1) * f];
                    for (c, o) in row.iter_mut().enumerate() {
                        *o = (0..f).map(|a| x[a] * coef[a * width + c]).sum();
                    }
                });
                Ok(out)
            }
        }
    }
}

/// One-shot conditional expectation of `targets` (`N x width`) at step `step`.
pub fn cond_expect(
    targets: &[f64],
    width: usize,
    paths: &DriverPaths,
    step: usize,
    cfg: &RegressionConfig,
) -> Result<Vec<f64>> {
    Projector::new(paths, step, cfg)?.project(targets, width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::{build_grid, sample_paths, tree_paths, DEFAULT_TREE_CAP};

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(3, 2).len(), 10);
        assert_eq!(monomials(0, 2).len(), 1);
        assert_eq!(monomials(2, 0).len(), 1);
    }

    #[test]
    fn in_span_target_is_reproduced() {
        let grid = build_grid(1.0, 4).unwrap();
        let paths = sample_paths(&grid, 500, 1, 1, 3, DriverMode::Gaussian, DEFAULT_TREE_CAP).unwrap();
        let w = paths.w_values();
        let t: Vec<f64> = (0..500).map(|p| w[p * 5 + 2]).collect();
        let out = cond_expect(&t, 1, &paths, 2, &RegressionConfig::default()).unwrap();
        for (a, b) in out.iter().zip(&t) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn tree_root_average_of_terminal_w_sign() {
        let grid = build_grid(1.0, 1).unwrap();
        let paths = tree_paths(&grid, 1, 1, DEFAULT_TREE_CAP).unwrap();
        let t: Vec<f64> = (0..paths.n_particles).map(|p| paths.w_increment(p, 0)[0].signum()).collect();
        let out = cond_expect(&t, 1, &paths, 0, &RegressionConfig::tree()).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tree_mode_rejects_gaussian_paths() {
        let grid = build_grid(1.0, 2).unwrap();
        let paths = sample_paths(&grid, 8, 1, 1, 1, DriverMode::Gaussian, DEFAULT_TREE_CAP).unwrap();
        assert!(cond_expect(&[0.0; 8], 1, &paths, 0, &RegressionConfig::tree()).is_err());
    }

    #[test]
    fn rank_deficiency_without_ridge_is_reported() {
        let grid = build_grid(1.0, 2).unwrap();
        let paths = sample_paths(&grid, 3, 1, 1, 1, DriverMode::Gaussian, DEFAULT_TREE_CAP).unwrap();
        let cfg = RegressionConfig { degree: 4, ridge: 0.0, mode: RegressionMode::Montecarlo, ..Default::default() };
        match cond_expect(&[1.0, 2.0, 3.0], 1, &paths, 1, &cfg) {
            Err(Error::Numerical(m)) => assert!(m.contains("ridge")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn future_w_projects_to_current_w() {
        // E[W_{t_j} | W_{t_i}] = W_{t_i}; compare the regression to that oracle.
        let grid = build_grid(1.0, 4).unwrap();
        let n = 20_000;
        let paths = sample_paths(&grid, n, 1, 1, 11, DriverMode::Gaussian, DEFAULT_TREE_CAP).unwrap();
        let w = paths.w_values();
        let t: Vec<f64> = (0..n).map(|p| w[p * 5 + 4]).collect();
        let cfg = RegressionConfig { degree: 1, ..Default::default() };
        let out = cond_expect(&t, 1, &paths, 1, &cfg).unwrap();
        // Residual mean square of the fitted projection vs the exact one (0.75 = T - t_1).
        let errs: Vec<f64> = (0..n).map(|p| (t[p] - out[p]).powi(2)).collect();
        let mse = errs.iter().sum::<f64>() / n as f64;
        let sd = (errs.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let exact: f64 = (0..n).map(|p| (t[p] - w[p * 5 + 1]).powi(2)).sum::<f64>() / n as f64;
        let se = 3.0 * sd / (n as f64).sqrt();
        assert!((mse - exact).abs() <= se, "mse {mse} exact {exact}");
        assert!((mse - 0.75).abs() <= se, "mse {mse}");
    }
}
