//! Time grids and the two Brownian drivers.
//!
//! `W` plays the forward role and `B` the backward role. Every particle owns
//! an independent ChaCha stream per driver, keyed by `(seed, particle, driver)`,
//! so regenerating an ensemble gives identical bytes whatever the thread count.
//! Bernoulli drivers replace each scalar increment with `±sqrt(dt)` and can be
//! enumerated exhaustively, which gives exact conditional expectations.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default limit on the number of leaves of an enumerated Bernoulli tree.
pub const DEFAULT_TREE_CAP: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub n_steps: usize,
    pub points: Vec<f64>,
    pub dt: f64,
}

impl TimeGrid {
    pub fn t(&self, i: usize) -> f64 {
        self.points[i]
    }
}

/// Uniform partition of `[0, horizon]` into `n_steps` intervals.
pub fn build_grid(horizon: f64, n_steps: usize) -> Result<TimeGrid> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(invalid(format!("horizon must be positive, got {horizon}")));
    }
    if n_steps == 0 {
        return Err(invalid("n_steps must be at least 1"));
    }
    let dt = horizon / n_steps as f64;
    let mut points: Vec<f64> = (0..=n_steps).map(|i| i as f64 * dt).collect();
    points[n_steps] = horizon;
    Ok(TimeGrid { horizon, n_steps, points, dt })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriverMode {
    Gaussian,
    BernoulliTree,
}

/// Driver tag used to key random streams and CSV rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Driver {
    W,
    B,
}

impl Driver {
    fn tag(self) -> u64 {
        match self {
            Driver::W => 0x57,
            Driver::B => 0x42,
        }
    }
}

/// Per-particle increments of both drivers on a shared grid.
///
/// Increments are stored row-major: `w[(p * n_steps + i) * w_dim + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverPaths {
    pub grid: TimeGrid,
    pub n_particles: usize,
    pub w_dim: usize,
    pub b_dim: usize,
    pub seed: u64,
    pub mode: DriverMode,
    /// True when the ensemble is the complete Bernoulli tree (uniform leaves).
    pub full_tree: bool,
    w: Vec<f64>,
    b: Vec<f64>,
}

fn stream(seed: u64, particle: usize, driver: Driver) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(particle as u64).to_le_bytes());
    key[16..24].copy_from_slice(&driver.tag().to_le_bytes());
    key[24..32].copy_from_slice(b"mfbdsde1");
    ChaCha8Rng::from_seed(key)
}

fn tree_bits(n_steps: usize, w_dim: usize, b_dim: usize) -> usize {
    n_steps * (w_dim + b_dim)
}

fn check_tree_cap(n_steps: usize, w_dim: usize, b_dim: usize, cap: usize) -> Result<usize> {
    let bits = tree_bits(n_steps, w_dim, b_dim);
    if bits >= 63 || (1usize << bits) > cap {
        return Err(Error::Capacity(format!(
            "Bernoulli tree with {n_steps} steps and {} signs per step exceeds the cap of {cap} leaves",
            w_dim + b_dim
        )));
    }
    Ok(1usize << bits)
}

/// Draw `n_particles` independent pairs of driver paths.
pub fn sample_paths(
    grid: &TimeGrid,
    n_particles: usize,
    w_dim: usize,
    b_dim: usize,
    seed: u64,
    mode: DriverMode,
    tree_cap: usize,
) -> Result<DriverPaths> {
    if n_particles == 0 {
        return Err(invalid("particle count must be at least 1"));
    }
    if w_dim == 0 || b_dim == 0 {
        return Err(invalid("driver dimensions must be at least 1"));
    }
    if mode == DriverMode::BernoulliTree {
        check_tree_cap(grid.n_steps, w_dim, b_dim, tree_cap)?;
    }
    let n = grid.n_steps;
    let sq = grid.dt.sqrt();
    let draw = |driver: Driver, dim: usize| -> Vec<f64> {
        let rows: Vec<Vec<f64>> = (0..n_particles)
            .into_par_iter()
            .map(|p| {
                let mut rng = stream(seed, p, driver);
                (0..n * dim)
                    .map(|_| match mode {
                        DriverMode::Gaussian => {
                            let x: f64 = rng.sample(StandardNormal);
                            x * sq
                        }
                        DriverMode::BernoulliTree => {
                            if rng.gen::<bool>() {
                                sq
                            } else {
                                -sq
                            }
                        }
                    })
                    .collect()
            })
            .collect();
        rows.concat()
    };
    let w = draw(Driver::W, w_dim);
    let b = draw(Driver::B, b_dim);
    Ok(DriverPaths {
        grid: grid.clone(),
        n_particles,
        w_dim,
        b_dim,
        seed,
        mode,
        full_tree: false,
        w,
        b,
    })
}

/// A node of the Bernoulli tree at grid index `step`: the W signs of the steps
/// before `step` and the B signs of the steps from `step` on are known.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub step: usize,
    /// `w_signs[i * w_dim + c]`, meaningful for `i < step`.
    pub w_signs: Vec<i8>,
    /// `b_signs[i * b_dim + c]`, meaningful for `i >= step`.
    pub b_signs: Vec<i8>,
    pub weight: f64,
}

impl TreeNode {
    /// The node seen at an earlier or equal grid index; unknown signs are zeroed.
    pub fn at_step(&self, step: usize, w_dim: usize, b_dim: usize) -> TreeNode {
        let mut w = self.w_signs.clone();
        let mut b = self.b_signs.clone();
        let n = w.len() / w_dim.max(1);
        for i in 0..n {
            if i >= step {
                w[i * w_dim..(i + 1) * w_dim].fill(0);
            }
            if i < step {
                b[i * b_dim..(i + 1) * b_dim].fill(0);
            }
        }
        let known = step * w_dim + (n - step) * b_dim;
        TreeNode { step, w_signs: w, b_signs: b, weight: 0.5f64.powi(known as i32) }
    }
}

fn leaf_signs(leaf: usize, n: usize, w_dim: usize, b_dim: usize) -> (Vec<i8>, Vec<i8>) {
    let per = w_dim + b_dim;
    let bits = n * per;
    let mut w = vec![0i8; n * w_dim];
    let mut b = vec![0i8; n * b_dim];
    for i in 0..n {
        for c in 0..per {
            let pos = bits - 1 - (i * per + c);
            let s = if (leaf >> pos) & 1 == 0 { 1 } else { -1 };
            if c < w_dim {
                w[i * w_dim + c] = s;
            } else {
                b[i * b_dim + c - w_dim] = s;
            }
        }
    }
    (w, b)
}

/// Every leaf of the Bernoulli tree, each with weight `2^-(n (l + d))`.
pub fn enumerate_tree(grid: &TimeGrid, w_dim: usize, b_dim: usize, cap: usize) -> Result<Vec<TreeNode>> {
    if w_dim == 0 || b_dim == 0 {
        return Err(invalid("driver dimensions must be at least 1"));
    }
    let leaves = check_tree_cap(grid.n_steps, w_dim, b_dim, cap)?;
    let weight = 1.0 / leaves as f64;
    Ok((0..leaves)
        .map(|leaf| {
            let (w_signs, b_signs) = leaf_signs(leaf, grid.n_steps, w_dim, b_dim);
            TreeNode { step: grid.n_steps, w_signs, b_signs, weight }
        })
        .collect())
}

/// The complete Bernoulli tree as an ensemble with one particle per leaf.
pub fn tree_paths(grid: &TimeGrid, w_dim: usize, b_dim: usize, cap: usize) -> Result<DriverPaths> {
    let leaves = enumerate_tree(grid, w_dim, b_dim, cap)?;
    let sq = grid.dt.sqrt();
    let mut w = Vec::with_capacity(leaves.len() * grid.n_steps * w_dim);
    let mut b = Vec::with_capacity(leaves.len() * grid.n_steps * b_dim);
    for leaf in &leaves {
        w.extend(leaf.w_signs.iter().map(|&s| s as f64 * sq));
        b.extend(leaf.b_signs.iter().map(|&s| s as f64 * sq));
    }
    Ok(DriverPaths {
        grid: grid.clone(),
        n_particles: leaves.len(),
        w_dim,
        b_dim,
        seed: 0,
        mode: DriverMode::BernoulliTree,
        full_tree: true,
        w,
        b,
    })
}

impl DriverPaths {
    /// Assemble paths from explicit increment arrays.
    pub fn from_increments(
        grid: TimeGrid,
        n_particles: usize,
        w_dim: usize,
        b_dim: usize,
        w: Vec<f64>,
        b: Vec<f64>,
        mode: DriverMode,
    ) -> Result<Self> {
        let n = grid.n_steps;
        if w.len() != n_particles * n * w_dim || b.len() != n_particles * n * b_dim {
            return Err(invalid("increment arrays do not match the declared shape"));
        }
        Ok(DriverPaths { grid, n_particles, w_dim, b_dim, seed: 0, mode, full_tree: false, w, b })
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    pub fn w_increment(&self, particle: usize, step: usize) -> &[f64] {
        let k = (particle * self.grid.n_steps + step) * self.w_dim;
        &self.w[k..k + self.w_dim]
    }

    pub fn b_increment(&self, particle: usize, step: usize) -> &[f64] {
        let k = (particle * self.grid.n_steps + step) * self.b_dim;
        &self.b[k..k + self.b_dim]
    }

    pub fn w_increments(&self) -> &[f64] {
        &self.w
    }

    pub fn b_increments(&self) -> &[f64] {
        &self.b
    }

    /// `W_{t_i}` for one particle.
    pub fn w_value(&self, particle: usize, i: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.w_dim];
        for s in 0..i {
            for (a, v) in acc.iter_mut().zip(self.w_increment(particle, s)) {
                *a += v;
            }
        }
        acc
    }

    /// `B_{t_i}` for one particle.
    pub fn b_value(&self, particle: usize, i: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.b_dim];
        for s in 0..i {
            for (a, v) in acc.iter_mut().zip(self.b_increment(particle, s)) {
                *a += v;
            }
        }
        acc
    }

    /// All cumulative W values, `[(p * (n + 1) + i) * w_dim + c]`.
    pub fn w_values(&self) -> Vec<f64> {
        cumulative(&self.w, self.n_particles, self.grid.n_steps, self.w_dim, false)
    }

    /// All backward tails `B_T - B_{t_i}`, `[(p * (n + 1) + i) * b_dim + c]`.
    pub fn b_tails(&self) -> Vec<f64> {
        cumulative(&self.b, self.n_particles, self.grid.n_steps, self.b_dim, true)
    }

    /// Whether the ensemble is a full Bernoulli tree usable for exact conditioning.
    pub fn is_full_tree(&self) -> bool {
        self.full_tree
    }

    /// Time reversal `s = T - t`: reversed B increments become the forward
    /// driver and reversed W increments the backward one. Applying it twice
    /// returns the original paths.
    pub fn reversed(&self) -> DriverPaths {
        let n = self.grid.n_steps;
        let flip = |src: &[f64], dim: usize| -> Vec<f64> {
            let mut out = vec![0.0; src.len()];
            for p in 0..self.n_particles {
                for i in 0..n {
                    let from = (p * n + i) * dim;
                    let to = (p * n + (n - 1 - i)) * dim;
                    out[to..to + dim].copy_from_slice(&src[from..from + dim]);
                }
            }
            out
        };
        DriverPaths {
            grid: self.grid.clone(),
            n_particles: self.n_particles,
            w_dim: self.b_dim,
            b_dim: self.w_dim,
            seed: self.seed,
            mode: self.mode,
            full_tree: self.full_tree,
            w: flip(&self.b, self.b_dim),
            b: flip(&self.w, self.w_dim),
        }
    }

    /// Write increments as CSV rows `(particle, step, driver, coordinate, increment)`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io { path: "<paths csv>".into(), message: e.to_string() };
        wtr.write_record(["particle", "step", "driver", "coordinate", "increment"]).map_err(io)?;
        for p in 0..self.n_particles {
            for i in 0..self.grid.n_steps {
                for (name, inc) in [("W", self.w_increment(p, i)), ("B", self.b_increment(p, i))] {
                    for (c, v) in inc.iter().enumerate() {
                        wtr.write_record([
                            p.to_string(),
                            i.to_string(),
                            name.to_string(),
                            c.to_string(),
                            format!("{v:e}"),
                        ])
                        .map_err(io)?;
                    }
                }
            }
        }
        wtr.flush().map_err(|e| Error::Io { path: "<paths csv>".into(), message: e.to_string() })
    }
}

fn cumulative(inc: &[f64], n_particles: usize, n: usize, dim: usize, tail: bool) -> Vec<f64> {
    let mut out = vec![0.0; n_particles * (n + 1) * dim];
    out.par_chunks_mut((n + 1) * dim).enumerate().for_each(|(p, row)| {
        if tail {
            for i in (0..n).rev() {
                for c in 0..dim {
                    row[i * dim + c] = row[(i + 1) * dim + c] + inc[(p * n + i) * dim + c];
                }
            }
        } else {
            for i in 0..n {
                for c in 0..dim {
                    row[(i + 1) * dim + c] = row[i * dim + c] + inc[(p * n + i) * dim + c];
                }
            }
        }
    });
    out
}

/// `B_T - B_{t_i}` for one particle; the zero vector at `i = n_steps`.
pub fn backward_increment_tail(paths: &DriverPaths, particle: usize, i: usize) -> Result<Vec<f64>> {
    if particle >= paths.n_particles {
        return Err(invalid(format!("particle {particle} out of range")));
    }
    if i > paths.grid.n_steps {
        return Err(invalid(format!("step {i} exceeds n_steps = {}", paths.grid.n_steps)));
    }
    let mut acc = vec![0.0; paths.b_dim];
    for s in i..paths.grid.n_steps {
        for (a, v) in acc.iter_mut().zip(paths.b_increment(particle, s)) {
            *a += v;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_examples() {
        let g = build_grid(1.0, 4).unwrap();
        assert_eq!(g.points, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.dt, 0.25);
        let g = build_grid(2.0, 1).unwrap();
        assert_eq!(g.points, vec![0.0, 2.0]);
        assert!(matches!(build_grid(1.0, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_grid(-1.0, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn tree_leaf_counts() {
        let g1 = build_grid(1.0, 1).unwrap();
        let t1 = enumerate_tree(&g1, 1, 1, DEFAULT_TREE_CAP).unwrap();
        assert_eq!(t1.len(), 4);
        assert!(t1.iter().all(|n| n.weight == 0.25));
        let g2 = build_grid(1.0, 2).unwrap();
        let t2 = enumerate_tree(&g2, 1, 1, DEFAULT_TREE_CAP).unwrap();
        assert_eq!(t2.len(), 16);
        let total: f64 = t2.iter().map(|n| n.weight).sum();
        assert!((total - 1.0).abs() < 1e-15);
        let big = build_grid(1.0, 11).unwrap();
        assert!(matches!(enumerate_tree(&big, 1, 1, DEFAULT_TREE_CAP), Err(Error::Capacity(_))));
    }

    #[test]
    fn node_projection_weights_sum_to_one() {
        let g = build_grid(1.0, 3).unwrap();
        let leaves = enumerate_tree(&g, 1, 1, DEFAULT_TREE_CAP).unwrap();
        for step in 0..=3 {
            let mut nodes: Vec<TreeNode> = leaves.iter().map(|l| l.at_step(step, 1, 1)).collect();
            nodes.sort_by(|a, b| (&a.w_signs, &a.b_signs).cmp(&(&b.w_signs, &b.b_signs)));
            nodes.dedup_by(|a, b| a.w_signs == b.w_signs && a.b_signs == b.b_signs);
            let total: f64 = nodes.iter().map(|n| n.weight).sum();
            assert!((total - 1.0).abs() < 1e-15, "step {step}: {total}");
        }
    }

    #[test]
    fn tail_examples() {
        let g = build_grid(1.0, 2).unwrap();
        let p = sample_paths(&g, 3, 1, 2, 7, DriverMode::Gaussian, DEFAULT_TREE_CAP).unwrap();
        assert_eq!(backward_increment_tail(&p, 1, 2).unwrap(), vec![0.0, 0.0]);
        assert_eq!(backward_increment_tail(&p, 1, 0).unwrap(), p.b_value(1, 2));
        assert_eq!(backward_increment_tail(&p, 1, 1).unwrap(), p.b_increment(1, 1).to_vec());
        assert!(backward_increment_tail(&p, 0, 3).is_err());
    }

    #[test]
    fn reversal_is_an_involution() {
        let g = build_grid(1.0, 5).unwrap();
        let p = sample_paths(&g, 4, 2, 1, 3, DriverMode::Gaussian, DEFAULT_TREE_CAP).unwrap();
        let r = p.reversed();
        assert_eq!(r.w_dim, 1);
        assert_eq!(r.b_dim, 2);
        assert_eq!(r.reversed(), p);
    }
}
