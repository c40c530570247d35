//! Problem instances shipped with the crate and used by the CLI and tests.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bdsde::Dims;
use crate::fbdsde::{FbdsdeSpec, Homotopy, MonotoneConstants, OffsetField, Offsets};
use crate::law::{FirstOrderInteraction, LinearMeanField, LocalFn, QuadraticMeanField, ScalarInteraction};
use crate::problem::{BoxSet, LqCoefficients, ProblemSpec, Terminal};

/// Scalar LQ constants without control-law coupling. The state enters the
/// running cost only through its mean.
pub fn lq_coefficients() -> LqCoefficients {
    LqCoefficients {
        f: [0.4, 0.2, 1.0],
        fbar: [0.1, 0.05, 0.0],
        g: [0.3, 0.2, 0.5],
        gbar: [0.1, 0.1, 0.0],
        h: [0.0, 0.0, 2.0],
        hbar: [0.3, 0.2, 0.0],
        phi: 1.0,
        phibar: 0.5,
    }
}

/// The same LQ model with `E[u]` entering drift, diffusion and cost.
pub fn lq_coefficients_with_mean_control() -> LqCoefficients {
    LqCoefficients { fbar: [0.1, 0.05, 0.3], gbar: [0.1, 0.1, 0.2], hbar: [0.3, 0.2, 0.4], ..lq_coefficients() }
}

/// Terminal datum `ξ = 0.2 + W_T` shared by the LQ instances.
pub fn lq_terminal() -> Terminal {
    Terminal::AffineW { offset: vec![0.2], slope: vec![1.0] }
}

pub fn lq_problem(c: &LqCoefficients) -> ProblemSpec {
    ProblemSpec::lq(c, lq_terminal(), BoxSet::whole_space(1))
}

/// Shipped LQ problem (no `E[u]` terms), unconstrained.
pub fn shipped_lq() -> ProblemSpec {
    lq_problem(&lq_coefficients())
}

/// Scalar problem whose state map is genuinely nonlinear in the control:
/// `f = 0.5 sin y + 0.2 z + u + 0.25 u²`, `g = 0.2 cos y + 0.1 u`,
/// `h = 0.5 y² + 0.5 u²`, `Φ = 0.5 y²`, `ξ = W_T`.
pub fn nonlinear_problem() -> ProblemSpec {
    ProblemSpec {
        dims: Dims { n: 1, l: 1, d: 1 },
        k: 1,
        f: Arc::new(LocalFn {
            in_dim: 3,
            out_dim: 1,
            value: Box::new(|_, x, _, o| o[0] = 0.5 * x[0].sin() + 0.2 * x[1] + x[2] + 0.25 * x[2] * x[2]),
            jac_x: Box::new(|_, x, _, o| o.copy_from_slice(&[0.5 * x[0].cos(), 0.2, 1.0 + 0.5 * x[2]])),
        }),
        g: Arc::new(LocalFn {
            in_dim: 3,
            out_dim: 1,
            value: Box::new(|_, x, _, o| o[0] = 0.2 * x[0].cos() + 0.1 * x[2]),
            jac_x: Box::new(|_, x, _, o| o.copy_from_slice(&[-0.2 * x[0].sin(), 0.0, 0.1])),
        }),
        h: Arc::new(QuadraticMeanField::diagonal(&[1.0, 0.0, 1.0], &[0.0, 0.0, 0.0])),
        phi: Arc::new(QuadraticMeanField::diagonal(&[1.0], &[0.0])),
        terminal: Terminal::AffineW { offset: vec![0.0], slope: vec![1.0] },
        admissible: BoxSet::whole_space(1),
    }
}

/// Zero dynamics with the given cost, used by small sanity checks.
pub fn zero_dynamics(h: [f64; 3], phi: f64, phibar: f64, terminal: Terminal) -> ProblemSpec {
    let c = LqCoefficients { h, phi, phibar, ..Default::default() };
    ProblemSpec::lq(&c, terminal, BoxSet::whole_space(1))
}

/// Scalar coupled system satisfying the monotonicity conditions, on rows
/// `(y, p, z, q)`:
/// `f = -0.5 p + 0.3 y + 0.2 E[y] + 0.1 sin y + 0.1`, `g = -0.5 q + 0.2`,
/// `F = 0.5 y + 0.3 p + 0.2 E[p]`, `G = 0.5 z`, `Ψ = y + 0.2 E[y]`, `ξ = 0.5 + W_T`.
pub fn monotone_system() -> FbdsdeSpec {
    coupled_system(1.0)
}

/// [`monotone_system`] with the sign of `F` reversed, which breaks monotonicity.
pub fn non_monotone_system() -> FbdsdeSpec {
    coupled_system(-1.0)
}

fn coupled_system(sign: f64) -> FbdsdeSpec {
    let f = ScalarInteraction {
        in_dim: 4,
        out_dim: 1,
        stat_dim: 1,
        stat: Box::new(|x, o| o[0] = x[0]),
        stat_jac: Box::new(|_, o| o.copy_from_slice(&[1.0, 0.0, 0.0, 0.0])),
        value: Box::new(|_, x, s, o| o[0] = -0.5 * x[1] + 0.3 * x[0] + 0.2 * s[0] + 0.1 * x[0].sin()),
        jac_x: Box::new(|_, x, _, o| o.copy_from_slice(&[0.3 + 0.1 * x[0].cos(), -0.5, 0.0, 0.0])),
        jac_s: Box::new(|_, _, _, o| o[0] = 0.2),
    };
    FbdsdeSpec {
        dims: Dims { n: 1, l: 1, d: 1 },
        f: Arc::new(f),
        g: Arc::new(LinearMeanField::new(4, 1, vec![0.0, 0.0, 0.0, -0.5], vec![0.0; 4])),
        big_f: Arc::new(LinearMeanField::new(4, 1, vec![0.5 * sign, 0.3 * sign, 0.0, 0.0], vec![0.0, 0.2 * sign, 0.0, 0.0])),
        big_g: Arc::new(LinearMeanField::new(4, 1, vec![0.0, 0.0, 0.5 * sign, 0.0], vec![0.0; 4])),
        psi: Arc::new(LinearMeanField::new(1, 1, vec![1.0], vec![0.2])),
        terminal: Terminal::AffineW { offset: vec![0.5], slope: vec![1.0] },
        offsets: Offsets {
            f0: OffsetField::Constant(vec![0.1]),
            g0: OffsetField::Constant(vec![0.2]),
            ..Default::default()
        },
        homotopy: Homotopy::Monotone { k2: 0.4, k3: 0.4 },
        monotone: (sign > 0.0).then_some(MonotoneConstants { k1: 2.0, k2: 0.4, k3: 0.4, k4: 1.0, lambda1: 0.0, lambda2: 0.0 }),
        structured: None,
    }
}

/// Scalar-interaction family on rows `(y, z, u)`:
/// `f = f·x + f_mean sin(E[y])`, `g = g·x + g_mean tanh(E[y])`,
/// `h = ½ Σ h_k x_k² + ½ h_mean E[y]²`, `Φ = ½ phi y² + ½ phi_mean E[y]²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalarParams {
    pub f: [f64; 3],
    pub f_mean: f64,
    pub g: [f64; 3],
    pub g_mean: f64,
    pub h: [f64; 3],
    pub h_mean: f64,
    pub phi: f64,
    pub phi_mean: f64,
}

impl Default for ScalarParams {
    fn default() -> Self {
        ScalarParams {
            f: [0.3, 0.2, 1.0],
            f_mean: 0.5,
            g: [0.2, 0.1, 0.3],
            g_mean: 0.2,
            h: [1.0, 0.0, 1.0],
            h_mean: 0.5,
            phi: 1.0,
            phi_mean: 0.0,
        }
    }
}

/// `a·x + c outer(E[y])` as a scalar interaction.
fn affine_plus_mean(a: [f64; 3], c: f64, outer: fn(f64) -> f64, outer_d: fn(f64) -> f64) -> ScalarInteraction {
    ScalarInteraction {
        in_dim: 3,
        out_dim: 1,
        stat_dim: 1,
        stat: Box::new(|x, o| o[0] = x[0]),
        stat_jac: Box::new(|_, o| o.copy_from_slice(&[1.0, 0.0, 0.0])),
        value: Box::new(move |_, x, s, o| o[0] = a[0] * x[0] + a[1] * x[1] + a[2] * x[2] + c * outer(s[0])),
        jac_x: Box::new(move |_, _, _, o| o.copy_from_slice(&a)),
        jac_s: Box::new(move |_, _, s, o| o[0] = c * outer_d(s[0])),
    }
}

fn tanh_d(x: f64) -> f64 {
    1.0 - x.tanh().powi(2)
}

pub fn scalar_problem(c: &ScalarParams, terminal: Terminal, admissible: BoxSet) -> ProblemSpec {
    ProblemSpec {
        dims: Dims { n: 1, l: 1, d: 1 },
        k: 1,
        f: Arc::new(affine_plus_mean(c.f, c.f_mean, f64::sin, f64::cos)),
        g: Arc::new(affine_plus_mean(c.g, c.g_mean, f64::tanh, tanh_d)),
        h: Arc::new(QuadraticMeanField::diagonal(&c.h, &[c.h_mean, 0.0, 0.0])),
        phi: Arc::new(QuadraticMeanField::diagonal(&[c.phi], &[c.phi_mean])),
        terminal,
        admissible,
    }
}

/// First-order interaction family on rows `(y, z, u)`:
/// `f = E'[f·x + f_kernel sin(y - y')]`, `g = E'[g·x + g_kernel tanh(y - y')]`,
/// with quadratic costs `h = ½ Σ h_k x_k²`, `Φ = ½ phi y²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FirstOrderParams {
    pub f: [f64; 3],
    pub f_kernel: f64,
    pub g: [f64; 3],
    pub g_kernel: f64,
    pub h: [f64; 3],
    pub phi: f64,
}

impl Default for FirstOrderParams {
    fn default() -> Self {
        FirstOrderParams { f: [0.3, 0.2, 1.0], f_kernel: 0.5, g: [0.2, 0.1, 0.3], g_kernel: 0.2, h: [1.0, 0.0, 1.0], phi: 1.0 }
    }
}

fn affine_plus_kernel(a: [f64; 3], c: f64, outer: fn(f64) -> f64, outer_d: fn(f64) -> f64) -> FirstOrderInteraction {
    FirstOrderInteraction {
        in_dim: 3,
        out_dim: 1,
        kernel: Box::new(move |_, x, xt, o| o[0] = a[0] * x[0] + a[1] * x[1] + a[2] * x[2] + c * outer(x[0] - xt[0])),
        kernel_jac_x: Box::new(move |_, x, xt, o| o.copy_from_slice(&[a[0] + c * outer_d(x[0] - xt[0]), a[1], a[2]])),
        kernel_jac_xt: Box::new(move |_, x, xt, o| o.copy_from_slice(&[-c * outer_d(x[0] - xt[0]), 0.0, 0.0])),
    }
}

pub fn first_order_problem(c: &FirstOrderParams, terminal: Terminal, admissible: BoxSet) -> ProblemSpec {
    ProblemSpec {
        dims: Dims { n: 1, l: 1, d: 1 },
        k: 1,
        f: Arc::new(affine_plus_kernel(c.f, c.f_kernel, f64::sin, f64::cos)),
        g: Arc::new(affine_plus_kernel(c.g, c.g_kernel, f64::tanh, tanh_d)),
        h: Arc::new(QuadraticMeanField::diagonal(&c.h, &[0.0; 3])),
        phi: Arc::new(QuadraticMeanField::diagonal(&[c.phi], &[0.0])),
        terminal,
        admissible,
    }
}
