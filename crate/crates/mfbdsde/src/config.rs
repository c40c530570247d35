//! Experiment configuration: TOML parsing, unknown-key detection and validation.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bdsde::{PicardConfig, SolveConfig};
use crate::control::{OptimizerConfig, SufficiencyConfig};
use crate::drivers::{build_grid, sample_paths, tree_paths, DriverMode, DriverPaths, DEFAULT_TREE_CAP};
use crate::error::{Error, Result};
use crate::fbdsde::{lq_hamiltonian_spec, ContinuationConfig, FbdsdeSpec, ProbeConfig};
use crate::instances::{first_order_problem, monotone_system, non_monotone_system, scalar_problem, FirstOrderParams, ScalarParams};
use crate::law::{EmpiricalLaw, Layout, LinearMeanField};
use crate::problem::{BoxSet, Control, LqCoefficients, ProblemSpec, Terminal};
use crate::regression::RegressionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    Lq,
    Scalar,
    FirstOrder,
    CustomLinear,
}

/// Which coupled system the `continuation` pipeline solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoupledSystem {
    /// The LQ Hamiltonian system built from `[problem.lq]`.
    LqHamiltonian,
    /// The shipped monotone system.
    Monotone,
    /// The shipped system with the sign of `F` reversed.
    NonMonotone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerminalConfig {
    /// `ξ = offset + slope W_T`.
    pub offset: f64,
    pub slope: f64,
}

impl Default for TerminalConfig {
    fn default() -> Self {
        TerminalConfig { offset: 0.2, slope: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    /// Constant initial control.
    pub initial: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig { initial: 0.0, lower: f64::NEG_INFINITY, upper: f64::INFINITY }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub kind: ProblemKind,
    pub system: CoupledSystem,
    pub terminal: TerminalConfig,
    pub control: ControlConfig,
    pub lq: LqCoefficients,
    pub scalar: ScalarParams,
    pub first_order: FirstOrderParams,
    pub custom_linear: CustomLinearParams,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            kind: ProblemKind::Lq,
            system: CoupledSystem::LqHamiltonian,
            terminal: TerminalConfig::default(),
            control: ControlConfig::default(),
            lq: crate::instances::lq_coefficients(),
            scalar: ScalarParams::default(),
            first_order: FirstOrderParams::default(),
            custom_linear: CustomLinearParams::default(),
        }
    }
}

/// Linear dynamics with constant offsets and quadratic costs, free of the LQ
/// sign constraints: `f = a·x + ā·E[x] + f0`, `g = b·x + b̄·E[x] + g0` on `x = (y, z, u)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CustomLinearParams {
    pub f: [f64; 3],
    pub fbar: [f64; 3],
    pub f0: f64,
    pub g: [f64; 3],
    pub gbar: [f64; 3],
    pub g0: f64,
    pub h: [f64; 3],
    pub hbar: [f64; 3],
    pub phi: f64,
    pub phibar: f64,
}

impl CustomLinearParams {
    pub fn problem(&self, terminal: Terminal, admissible: BoxSet) -> ProblemSpec {
        let c = LqCoefficients {
            f: self.f,
            fbar: self.fbar,
            g: self.g,
            gbar: self.gbar,
            h: self.h,
            hbar: self.hbar,
            phi: self.phi,
            phibar: self.phibar,
        };
        let mut spec = ProblemSpec::lq(&c, terminal, admissible);
        spec.f = Arc::new(LinearMeanField::new(3, 1, self.f.to_vec(), self.fbar.to_vec()).with_offset(vec![self.f0]));
        spec.g = Arc::new(LinearMeanField::new(3, 1, self.g.to_vec(), self.gbar.to_vec()).with_offset(vec![self.g0]));
        spec
    }
}

/// Closed-form solutions the `simulate` pipeline can compare against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reference {
    None,
    /// `f = g = 0`, `ξ = offset + slope W_T`: `y = offset + slope W_t`, `z = slope`.
    Martingale,
    /// `f = 0`, `g = g0`, `ξ = offset`: `y_t = offset + g0 (B_T - B_t)` pathwise, `z = 0`.
    BackwardNoise,
    /// `f = a1 y + ā1 E[y]`, `g = 0`, `ξ = offset`: `E[y_0] = offset e^{(a1 + ā1) T}`.
    MeanFieldExponential,
}

/// Expected outcome of an assumption probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expectation {
    Any,
    Pass,
    Fail,
}

impl Expectation {
    pub fn matches(self, passed: bool) -> bool {
        match self {
            Expectation::Any => true,
            Expectation::Pass => passed,
            Expectation::Fail => !passed,
        }
    }
}

/// Checks evaluated by the pipelines. Each failing check makes the run fail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChecksConfig {
    /// Standard errors allowed in statistical comparisons.
    pub sigmas: f64,
    pub reference: Reference,
    /// Tolerance on the `y` error of the reference comparison.
    pub y_tol: f64,
    /// Tolerance on the `z` error of the reference comparison.
    pub z_tol: f64,
    /// Itô, product-rule and quadrature sign probes on the driver paths.
    pub ito_probes: bool,
    /// Compare both derivative routes and central differences.
    pub gradient: bool,
    pub fd_eps: f64,
    pub fd_rel_tol: f64,
    /// Check that the variational quotient error decreases with `ε`.
    pub variational: bool,
    pub variational_eps: Vec<f64>,
    /// Seed of the random direction used by the derivative checks.
    pub direction_seed: u64,
    /// Solve the coupled system again from a distant initial iterate.
    pub uniqueness: bool,
    pub expect_monotone: Expectation,
    pub expect_structured: Expectation,
    /// Skip the coupled solve and only run the assumption probes.
    pub probe_only: bool,
    /// Agreement required between tree-exact solvers and backward induction.
    pub oracle_tol: f64,
    /// Depth of the Bernoulli tree used by `oracle-check`.
    pub oracle_steps: usize,
}

impl Default for ChecksConfig {
    fn default() -> Self {
        ChecksConfig {
            sigmas: 3.0,
            reference: Reference::None,
            y_tol: 0.02,
            z_tol: 0.05,
            ito_probes: false,
            gradient: true,
            fd_eps: 1e-4,
            fd_rel_tol: 1e-3,
            variational: true,
            variational_eps: vec![0.1, 0.05, 0.025],
            direction_seed: 0,
            uniqueness: true,
            expect_monotone: Expectation::Any,
            expect_structured: Expectation::Any,
            probe_only: false,
            oracle_tol: 1e-12,
            oracle_steps: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { horizon: 1.0, n_steps: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub particles: usize,
    pub seed: u64,
    pub mode: DriverMode,
    pub tree_cap: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { particles: 2000, seed: 0, mode: DriverMode::Gaussian, tree_cap: DEFAULT_TREE_CAP }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
    pub formats: Vec<ReportFormat>,
    /// Write two-column `.dat` series next to the reports.
    pub plot_data: bool,
    /// Particles written to solution CSVs; the diagnostics always use the full ensemble.
    pub csv_particles: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into(), formats: vec![ReportFormat::Csv, ReportFormat::Json], plot_data: true, csv_particles: 100 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub grid: GridConfig,
    pub ensemble: EnsembleConfig,
    pub regression: RegressionConfig,
    pub picard: PicardConfig,
    pub optimizer: OptimizerConfig,
    pub sufficiency: SufficiencyConfig,
    pub continuation: ContinuationConfig,
    pub probe: ProbeConfig,
    pub checks: ChecksConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn solve_config(&self) -> SolveConfig {
        SolveConfig { regression: self.regression.clone(), picard: self.picard.clone() }
    }

    pub fn admissible(&self) -> BoxSet {
        BoxSet { lower: vec![self.problem.control.lower], upper: vec![self.problem.control.upper] }
    }

    pub fn terminal(&self) -> Terminal {
        let t = &self.problem.terminal;
        Terminal::AffineW { offset: vec![t.offset], slope: vec![t.slope] }
    }

    pub fn problem_spec(&self) -> ProblemSpec {
        let (terminal, set) = (self.terminal(), self.admissible());
        match self.problem.kind {
            ProblemKind::Lq => ProblemSpec::lq(&self.problem.lq, terminal, set),
            ProblemKind::CustomLinear => self.problem.custom_linear.problem(terminal, set),
            ProblemKind::Scalar => scalar_problem(&self.problem.scalar, terminal, set),
            ProblemKind::FirstOrder => first_order_problem(&self.problem.first_order, terminal, set),
        }
    }

    pub fn coupled_system(&self) -> Result<FbdsdeSpec> {
        match self.problem.system {
            CoupledSystem::LqHamiltonian => lq_hamiltonian_spec(&self.problem.lq, self.terminal()),
            CoupledSystem::Monotone => Ok(monotone_system()),
            CoupledSystem::NonMonotone => Ok(non_monotone_system()),
        }
    }

    /// Constant initial control sized for `paths`.
    pub fn initial_control(&self, paths: &DriverPaths) -> Control {
        let mut u = Control::constant(paths.n_steps(), paths.n_particles, &[self.problem.control.initial]);
        u.project(&self.admissible());
        u
    }

    /// Driver paths for the configured ensemble; tree mode ignores `particles`.
    pub fn paths(&self) -> Result<DriverPaths> {
        let grid = build_grid(self.grid.horizon, self.grid.n_steps)?;
        match self.ensemble.mode {
            DriverMode::Gaussian => {
                sample_paths(&grid, self.ensemble.particles, 1, 1, self.ensemble.seed, DriverMode::Gaussian, self.ensemble.tree_cap)
            }
            DriverMode::BernoulliTree => tree_paths(&grid, 1, 1, self.ensemble.tree_cap),
        }
    }

    /// Canonical TOML form, used for hashing and replay.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }
}

/// Parse and validate a configuration document. All problems found are
/// reported together, one per line.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let value: toml::Value = text.parse().map_err(|e: toml::de::Error| Error::Config(format!("syntax: {}", e.message())))?;
    let schema = toml::Value::try_from(ExperimentConfig::default()).expect("default configuration serializes");
    let mut errors = Vec::new();
    unknown_keys(&value, &schema, "", &mut errors);
    if !errors.is_empty() {
        return Err(Error::Config(errors.join("\n")));
    }
    let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().trim().to_string()))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn unknown_keys(value: &toml::Value, schema: &toml::Value, path: &str, errors: &mut Vec<String>) {
    let (Some(table), Some(known)) = (value.as_table(), schema.as_table()) else {
        return;
    };
    for (key, v) in table {
        let here = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        match known.get(key) {
            Some(s) => unknown_keys(v, s, &here, errors),
            None => {
                let nearest = known
                    .keys()
                    .map(|k| (strsim::levenshtein(key, k), k))
                    .min()
                    .filter(|(d, k)| *d <= 2.max(k.len() / 3))
                    .map(|(_, k)| format!("; did you mean `{k}`?"))
                    .unwrap_or_default();
                errors.push(format!("unknown key `{here}`{nearest}"));
            }
        }
    }
}

/// Validators of every referenced module, reported together.
pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    let mut errors = Vec::new();
    let mut check = |ok: bool, msg: &str| {
        if !ok {
            errors.push(msg.to_string());
        }
    };
    check(cfg.grid.horizon > 0.0 && cfg.grid.horizon.is_finite(), "grid: horizon > 0");
    check(cfg.grid.n_steps >= 1, "grid: n_steps >= 1");
    check(cfg.ensemble.particles >= 1, "ensemble: particles >= 1");
    check(cfg.problem.control.lower <= cfg.problem.control.upper, "problem.control: lower <= upper");
    check(cfg.problem.control.initial.is_finite(), "problem.control: initial is finite");
    check(cfg.picard.tol > 0.0 && cfg.picard.max_iter >= 1, "picard: tol > 0 and max_iter >= 1");
    check(cfg.optimizer.step > 0.0 && cfg.optimizer.shrink > 0.0 && cfg.optimizer.shrink < 1.0, "optimizer: step > 0 and 0 < shrink < 1");
    check(cfg.optimizer.tol > 0.0, "optimizer: tol > 0");
    let c = &cfg.continuation;
    check(c.delta > 0.0 && c.delta <= 1.0, "continuation: 0 < delta <= 1");
    check(c.delta_min > 0.0 && c.delta_min <= c.delta, "continuation: 0 < delta_min <= delta");
    check(c.tol > 0.0 && c.inner.tol > 0.0, "continuation: tol > 0 and inner.tol > 0");
    check(!cfg.output.dir.is_empty(), "output: dir is not empty");
    let k = &cfg.checks;
    check(k.sigmas > 0.0 && k.y_tol >= 0.0 && k.z_tol >= 0.0, "checks: sigmas > 0 and tolerances >= 0");
    check(k.fd_eps > 0.0 && k.fd_rel_tol > 0.0, "checks: fd_eps > 0 and fd_rel_tol > 0");
    check(k.variational_eps.iter().all(|e| *e > 0.0), "checks: variational_eps > 0");
    check((1..=5).contains(&k.oracle_steps), "checks: 1 <= oracle_steps <= 5");

    let needs_lq = cfg.problem.kind == ProblemKind::Lq || cfg.problem.system == CoupledSystem::LqHamiltonian;
    if needs_lq {
        if let Err(e) = cfg.problem.lq.validate() {
            errors.push(message(e));
        }
        if cfg.problem.system == CoupledSystem::LqHamiltonian {
            if let Err(e) = lq_hamiltonian_spec(&cfg.problem.lq, cfg.terminal()) {
                let m = message(e);
                if !errors.contains(&m) {
                    errors.push(m);
                }
            }
        }
    }
    if cfg.problem.kind != ProblemKind::Lq {
        let spec = cfg.problem_spec();
        if let Err(e) = spec.validate() {
            errors.push(message(e));
        }
        let bounds = spec.coefficient_bounds(&probe_law(&spec, cfg.ensemble.seed));
        errors.extend(bounds.failures);
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errors.join("\n")))
    }
}

fn message(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// Standard normal rows `(y, z, u)` on which the smallness constants are estimated.
fn probe_law(spec: &ProblemSpec, seed: u64) -> EmpiricalLaw {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = spec.x_width();
    let points = (0..64 * w).map(|_| StandardNormal.sample(&mut rng)).collect();
    EmpiricalLaw::new(Layout::new(&[("x", w)]), points).expect("probe law has a positive size")
}
