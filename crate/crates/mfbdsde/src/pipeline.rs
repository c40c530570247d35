//! Experiment pipelines behind the command-line subcommands.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::adjoint::{solve_adjoint, solve_adjoint_on_tree};
use crate::bdsde::{backward_quadrature_probe, ito_square_probe, product_rule_probe, Estimate, SolveConfig};
use crate::config::{CustomLinearParams, Expectation, ExperimentConfig, ProblemKind, Reference, ReportFormat};
use crate::control::{
    evaluate_cost, finite_difference, gateaux_derivative, optimize, project, random_direction, solve_variational,
    solve_variational_on_tree, verify_sufficiency, OptimizationReport, SufficiencyReport, Termination,
};
use crate::drivers::{build_grid, tree_paths, DriverPaths};
use crate::error::{Error, Result};
use crate::fbdsde::{
    continuation_solve, fbdsde_residuals, probe_assumptions, solve_alpha0, solve_alpha0_on_tree, solve_lq_hamiltonian_system,
    ContinuationState, ContinuationStatus, FbdsdeSolution, FbdsdeSpec, InnerConfig,
};
use crate::instances::{monotone_system, nonlinear_problem, shipped_lq};
use crate::problem::{residual_check, solve_mf_bdsde, solve_on_tree, Control, ProblemSpec, Terminal};
use crate::report::{series, solution_csv, Artifact, ArtifactKind, Diagnostics, Field};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Optimize,
    Continuation,
    LqVerify,
    OracleCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Optimize => "optimize",
            Command::Continuation => "continuation",
            Command::LqVerify => "lq-verify",
            Command::OracleCheck => "oracle-check",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        [Command::Simulate, Command::Optimize, Command::Continuation, Command::LqVerify, Command::OracleCheck]
            .into_iter()
            .find(|c| c.name() == name)
    }
}

/// Diagnostics and output files of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub diagnostics: Diagnostics,
    pub artifacts: Vec<Artifact>,
}

impl RunOutput {
    pub fn passed(&self) -> bool {
        self.diagnostics.passed()
    }
}

/// Run one pipeline. Outputs depend only on the configuration, never on the
/// thread count.
pub fn run_experiment(command: Command, cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut diag = Diagnostics::new(command.name(), cfg.ensemble.seed);
    let mut artifacts = Vec::new();
    match command {
        Command::Simulate => simulate(cfg, &mut diag, &mut artifacts)?,
        Command::Optimize => optimize_run(cfg, &mut diag, &mut artifacts)?,
        Command::Continuation => continuation(cfg, &mut diag, &mut artifacts)?,
        Command::LqVerify => lq_verify(cfg, &mut diag, &mut artifacts)?,
        Command::OracleCheck => oracle_check(cfg, &mut diag, &mut artifacts)?,
    }
    let wants = |f: ReportFormat| cfg.output.formats.contains(&f);
    artifacts.retain(|a| match a.kind {
        ArtifactKind::Csv => wants(ReportFormat::Csv),
        ArtifactKind::Json => wants(ReportFormat::Json),
        ArtifactKind::Plot => cfg.output.plot_data,
    });
    if wants(ReportFormat::Json) {
        artifacts.push(Artifact::new("diagnostics.json", ArtifactKind::Json, diag.to_json()));
    }
    Ok(RunOutput { diagnostics: diag, artifacts })
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// `(t_i, mean of coordinate 0)` per grid point.
fn mean_series(paths: &DriverPaths, steps: &[Vec<f64>], width: usize) -> Vec<(f64, f64)> {
    steps
        .iter()
        .enumerate()
        .map(|(i, v)| (paths.grid.t(i), mean(&v.iter().step_by(width.max(1)).copied().collect::<Vec<_>>())))
        .collect()
}

fn plot(name: &str, y_label: &str, points: Vec<(f64, f64)>) -> Artifact {
    Artifact::new(name, ArtifactKind::Plot, series("t", y_label, points))
}

fn csv(name: &str, fields: &[Field], cfg: &ExperimentConfig) -> Result<Artifact> {
    Ok(Artifact::new(name, ArtifactKind::Csv, solution_csv(fields, cfg.output.csv_particles)?))
}

fn estimate_check(diag: &mut Diagnostics, name: &str, e: &Estimate, sigmas: f64) {
    let score = if e.std_error > 0.0 { (e.mean - e.expected).abs() / e.std_error } else { (e.mean - e.expected).abs() };
    diag.check(name, e.within(sigmas), score, sigmas, format!("mean {:e}, expected {:e}, std error {:e}", e.mean, e.expected, e.std_error));
}

fn simulate(cfg: &ExperimentConfig, diag: &mut Diagnostics, artifacts: &mut Vec<Artifact>) -> Result<()> {
    let spec = cfg.problem_spec();
    let paths = cfg.paths()?;
    let u = cfg.initial_control(&paths);
    let sol = solve_mf_bdsde(&spec, &u, &paths, &cfg.solve_config())?;
    let residuals = residual_check(&sol, &spec, &u, &paths)?;
    let cost = evaluate_cost(&spec, &sol, &u, &paths);
    let d = &sol.diagnostics;
    diag.section(
        "state",
        json!({
            "particles": paths.n_particles,
            "n_steps": paths.n_steps(),
            "dt": paths.grid.dt,
            "picard_iterations": d.iterations,
            "picard_converged": d.converged,
            "picard_displacements": d.picard_displacements,
            "mean_y0": mean(&sol.y[0]),
            "max_residual": residuals.iter().fold(0.0f64, |a, b| a.max(*b)),
            "residuals": residuals,
        }),
    );
    diag.section("cost", cost);
    diag.check("state fixed point converged", d.converged, d.iterations as f64, cfg.picard.max_iter as f64, "Picard sweeps on the law");

    if cfg.checks.reference != Reference::None {
        reference_check(cfg, &paths, &sol, diag)?;
    }
    if cfg.checks.ito_probes && paths.w_dim == 1 && paths.b_dim == 1 {
        let s = cfg.checks.sigmas;
        let ito = ito_square_probe(&paths, 0.5, 1.2);
        let prod = product_rule_probe(&paths, 0.3, 0.8, 0.6, -0.4, 0.5, 0.9);
        let (right, left) = backward_quadrature_probe(&paths);
        diag.section("ito_probes", json!({ "ito_square": ito, "product_rule": prod, "right_endpoint_sum": right, "left_endpoint_sum": left }));
        estimate_check(diag, "Ito square with backward correction", &ito, s);
        estimate_check(diag, "product rule cross term", &prod, s);
        estimate_check(diag, "right-endpoint sum of backward increments", &right, s);
        estimate_check(diag, "left-endpoint sum of backward increments", &left, s);
    }

    let n = spec.dims.n;
    let zw = spec.dims.z_width();
    artifacts.push(csv("solution.csv", &[Field { name: "y", width: n, steps: &sol.y }, Field { name: "z", width: zw, steps: &sol.z }], cfg)?);
    artifacts.push(plot("mean_y.dat", "mean_y", mean_series(&paths, &sol.y, n)));
    artifacts.push(plot("mean_z.dat", "mean_z", mean_series(&paths, &sol.z[..sol.n_steps()], zw)));
    Ok(())
}

fn reference_check(cfg: &ExperimentConfig, paths: &DriverPaths, sol: &crate::bdsde::EnsembleSolution, diag: &mut Diagnostics) -> Result<()> {
    let c = &cfg.problem.custom_linear;
    let zero3 = [0.0; 3];
    let (offset, slope) = (cfg.problem.terminal.offset, cfg.problem.terminal.slope);
    let no_g = c.g == zero3 && c.gbar == zero3 && c.g0 == 0.0;
    let no_f = c.f == zero3 && c.fbar == zero3 && c.f0 == 0.0;
    let (ok, needs) = match cfg.checks.reference {
        Reference::None => return Ok(()),
        Reference::Martingale => (no_f && no_g, "f = g = 0"),
        Reference::BackwardNoise => (no_f && c.g == zero3 && c.gbar == zero3 && slope == 0.0, "f = 0, g = g0 and a constant terminal value"),
        Reference::MeanFieldExponential => (
            no_g && c.f0 == 0.0 && c.f[1..] == [0.0, 0.0] && c.fbar[1..] == [0.0, 0.0] && slope == 0.0,
            "f = a1 y + abar1 E[y], g = 0 and a constant terminal value",
        ),
    };
    if cfg.problem.kind != ProblemKind::CustomLinear || !ok {
        return Err(Error::Config(format!("checks.reference = {:?} needs a custom-linear problem with {needs}", cfg.checks.reference)));
    }
    let n_steps = paths.n_steps();
    let rows = paths.n_particles;
    let (tol_y, tol_z) = (cfg.checks.y_tol, cfg.checks.z_tol);
    match cfg.checks.reference {
        Reference::Martingale => {
            let w = paths.w_values();
            let y_err = (0..=n_steps)
                .map(|i| rms(&(0..rows).map(|p| sol.y[i][p] - (offset + slope * w[p * (n_steps + 1) + i])).collect::<Vec<_>>()))
                .fold(0.0f64, f64::max);
            let z_err = (0..n_steps).map(|i| rms(&sol.z[i].iter().map(|z| z - slope).collect::<Vec<_>>())).fold(0.0f64, f64::max);
            diag.section("reference", json!({ "kind": "martingale", "max_rms_y_error": y_err, "max_rms_z_error": z_err }));
            diag.check("y matches offset + slope W", y_err <= tol_y, y_err, tol_y, "max over the grid of the ensemble RMS");
            diag.check("z matches slope", z_err <= tol_z, z_err, tol_z, "max over the grid of the ensemble RMS");
        }
        Reference::BackwardNoise => {
            let tails = paths.b_tails();
            let y_err = (0..=n_steps)
                .flat_map(|i| (0..rows).map(move |p| (i, p)))
                .map(|(i, p)| (sol.y[i][p] - (offset + c.g0 * tails[p * (n_steps + 1) + i])).abs())
                .fold(0.0f64, f64::max);
            let z_err = (0..n_steps).map(|i| rms(&sol.z[i])).fold(0.0f64, f64::max);
            diag.section("reference", json!({ "kind": "backward-noise", "max_abs_y_error": y_err, "max_rms_z": z_err }));
            diag.check("y matches offset + g0 (B_T - B_t) pathwise", y_err <= tol_y, y_err, tol_y, "max absolute error");
            diag.check("z vanishes", z_err <= tol_z, z_err, tol_z, "max over the grid of the ensemble RMS");
        }
        Reference::MeanFieldExponential => {
            let target = offset * ((c.f[0] + c.fbar[0]) * paths.grid.horizon).exp();
            let got = mean(&sol.y[0]);
            let err = if target != 0.0 { (got - target).abs() / target.abs() } else { got.abs() };
            diag.section("reference", json!({ "kind": "mean-field-exponential", "mean_y0": got, "target": target, "relative_error": err }));
            diag.check("mean y0 matches the exponential", err <= tol_y, err, tol_y, "relative error");
        }
        Reference::None => {}
    }
    Ok(())
}

fn sufficiency_checks(diag: &mut Diagnostics, report: &SufficiencyReport) {
    diag.check(
        "convexity probe",
        report.convexity_probe_passed,
        report.convexity_violations as f64,
        0.0,
        format!("worst supporting-hyperplane gap {:e}", report.worst_convexity_gap),
    );
    diag.check(
        "no admissible perturbation beats the candidate",
        report.violations == 0,
        report.violations as f64,
        0.0,
        format!("{} perturbations", report.trials.len()),
    );
}

fn optimizer_check(diag: &mut Diagnostics, report: &OptimizationReport, tol: f64) {
    let last = report.smp_residuals.last().copied().unwrap_or(f64::NAN);
    diag.check(
        "optimizer converged",
        report.termination == Termination::Converged,
        last,
        tol,
        format!("{:?} after {} iterations", report.termination, report.iterations),
    );
}

fn optimize_run(cfg: &ExperimentConfig, diag: &mut Diagnostics, artifacts: &mut Vec<Artifact>) -> Result<()> {
    let spec = cfg.problem_spec();
    let paths = cfg.paths()?;
    let solve = cfg.solve_config();
    let u0 = cfg.initial_control(&paths);
    let checks = &cfg.checks;
    if checks.gradient || checks.variational {
        let state = solve_mf_bdsde(&spec, &u0, &paths, &solve)?;
        let mut rng = ChaCha8Rng::seed_from_u64(checks.direction_seed);
        let v = random_direction(&u0, &mut rng);
        if checks.gradient {
            let adj = solve_adjoint(&spec, &state, &u0, &paths, &solve)?;
            let g = gateaux_derivative(&spec, &state, &adj, &u0, &v, &paths, &solve)?;
            let fd = finite_difference(&spec, &u0, &v, checks.fd_eps, &paths, &solve)?;
            let rel = (fd - g.route2.mean).abs() / g.route2.mean.abs().max(f64::MIN_POSITIVE);
            diag.section("gradient", json!({ "derivative": g, "central_difference": fd, "fd_eps": checks.fd_eps, "relative_error": rel }));
            estimate_check(diag, "variational and adjoint derivatives agree", &g.gap, checks.sigmas);
            diag.check("adjoint derivative matches central differences", rel <= checks.fd_rel_tol, rel, checks.fd_rel_tol, "relative error");
        }
        if checks.variational {
            let var = solve_variational(&spec, &state, &u0, &v, &paths, &solve)?;
            let mut errors = Vec::new();
            for &eps in &checks.variational_eps {
                let moved = solve_mf_bdsde(&spec, &u0.axpy(eps, &v), &paths, &solve)?;
                let diffs: Vec<f64> = (0..=paths.n_steps())
                    .flat_map(|i| moved.y[i].iter().zip(&state.y[i]).zip(&var.y[i]).map(|((a, b), k)| (a - b) / eps - k).collect::<Vec<_>>())
                    .collect();
                errors.push(rms(&diffs).powi(2));
            }
            let worst = errors.windows(2).map(|w| w[1] / w[0]).fold(0.0f64, f64::max);
            let decreasing = errors.windows(2).all(|w| w[1] < w[0]);
            diag.section("variational", json!({ "eps": checks.variational_eps, "mean_square_errors": errors }));
            diag.check("variational quotient error decreases with eps", decreasing, worst, 1.0, "largest ratio of consecutive errors");
        }
    }
    // `max_iters = 0` runs only the derivative checks above.
    if cfg.optimizer.max_iters == 0 {
        return Ok(());
    }
    let (u, report) = optimize(&spec, &u0, &paths, &solve, &cfg.optimizer)?;
    optimizer_check(diag, &report, cfg.optimizer.tol);
    let state = solve_mf_bdsde(&spec, &u, &paths, &solve)?;
    let cost = evaluate_cost(&spec, &state, &u, &paths);
    diag.section("optimizer", json!({ "report": report, "final_cost": cost }));
    if cfg.sufficiency.directions > 0 {
        let suff = verify_sufficiency(&spec, &u, &paths, &solve, &cfg.sufficiency)?;
        sufficiency_checks(diag, &suff);
        diag.section("sufficiency", suff);
    }
    let (n, zw) = (spec.dims.n, spec.dims.z_width());
    artifacts.push(csv(
        "solution.csv",
        &[Field { name: "y", width: n, steps: &state.y }, Field { name: "z", width: zw, steps: &state.z }, Field { name: "u", width: u.k, steps: &u.values }],
        cfg,
    )?);
    artifacts.push(Artifact::new(
        "optimizer_cost.dat",
        ArtifactKind::Plot,
        series("iteration", "cost", report.costs.iter().enumerate().map(|(i, c)| (i as f64, *c))),
    ));
    artifacts.push(Artifact::new(
        "optimizer_residual.dat",
        ArtifactKind::Plot,
        series("iteration", "smp_residual", report.smp_residuals.iter().enumerate().map(|(i, c)| (i as f64, *c))),
    ));
    artifacts.push(plot("mean_control.dat", "mean_u", mean_series(&paths, &u.values, u.k)));
    Ok(())
}

fn lq_verify(cfg: &ExperimentConfig, diag: &mut Diagnostics, artifacts: &mut Vec<Artifact>) -> Result<()> {
    if cfg.problem.kind != ProblemKind::Lq {
        return Err(Error::Config("lq-verify needs problem.kind = \"lq\"".into()));
    }
    let c = &cfg.problem.lq;
    let spec = cfg.problem_spec();
    let paths = cfg.paths()?;
    let solve = cfg.solve_config();
    let ham = solve_lq_hamiltonian_system(c, cfg.terminal(), &paths, &solve, &cfg.continuation)?;
    continuation_checks(diag, &ham.state);
    let closed = project(&ham.control, &spec.admissible);
    let clipped = closed != ham.control;
    let state_c = solve_mf_bdsde(&spec, &closed, &paths, &solve)?;
    let j_closed = evaluate_cost(&spec, &state_c, &closed, &paths);

    let (u_opt, report) = optimize(&spec, &cfg.initial_control(&paths), &paths, &solve, &cfg.optimizer)?;
    optimizer_check(diag, &report, cfg.optimizer.tol);
    let state_o = solve_mf_bdsde(&spec, &u_opt, &paths, &solve)?;
    let j_opt = evaluate_cost(&spec, &state_o, &u_opt, &paths);
    let gap = j_opt.mean - j_closed.mean;
    let combined = j_opt.std_error.hypot(j_closed.std_error);
    let s = cfg.checks.sigmas;
    diag.section(
        "closed_form",
        json!({ "cost": j_closed, "continuation": ham.state, "mean_control_gap": ham.mean_control_gap, "clipped_to_admissible_set": clipped }),
    );
    diag.section("optimizer", json!({ "cost": j_opt, "report": report }));
    diag.section("comparison", json!({ "gap": gap, "combined_std_error": combined, "sigmas": s }));
    diag.check(
        "optimizer and closed-form costs agree",
        gap.abs() <= s * combined,
        gap.abs(),
        s * combined,
        format!("J(optimizer) = {:e}, J(closed form) = {:e}", j_opt.mean, j_closed.mean),
    );
    if cfg.sufficiency.directions > 0 {
        let suff = verify_sufficiency(&spec, &u_opt, &paths, &solve, &cfg.sufficiency)?;
        sufficiency_checks(diag, &suff);
        diag.section("sufficiency", suff);
    }
    artifacts.push(csv(
        "controls.csv",
        &[Field { name: "u_closed_form", width: 1, steps: &closed.values }, Field { name: "u_optimizer", width: 1, steps: &u_opt.values }],
        cfg,
    )?);
    artifacts.push(plot("mean_control_closed_form.dat", "mean_u", mean_series(&paths, &closed.values, 1)));
    artifacts.push(plot("mean_control_optimizer.dat", "mean_u", mean_series(&paths, &u_opt.values, 1)));
    artifacts.push(Artifact::new(
        "optimizer_cost.dat",
        ArtifactKind::Plot,
        series("iteration", "cost", report.costs.iter().enumerate().map(|(i, c)| (i as f64, *c))),
    ));
    Ok(())
}

fn continuation_checks(diag: &mut Diagnostics, state: &ContinuationState) {
    let converged = state.status == ContinuationStatus::Converged;
    diag.check("continuation reached alpha = 1", converged, state.alpha, 1.0, format!("{:?}", state.status));
    let ratio = state.max_contraction_ratio();
    diag.check(
        "recorded contraction ratios below one",
        converged && ratio < 1.0,
        ratio,
        1.0,
        format!("{} accepted steps", state.accepted_steps()),
    );
}

/// Initial iterate far from the solution, used by the uniqueness probe.
fn distant_iterate(spec: &FbdsdeSpec, paths: &DriverPaths) -> FbdsdeSolution {
    let mut s = FbdsdeSolution::zeros(spec.dims, paths.n_particles, paths.n_steps());
    for (i, v) in s.y.iter_mut().enumerate() {
        v.iter_mut().enumerate().for_each(|(r, x)| *x = 5.0 + (r % 7) as f64 - i as f64);
    }
    s.q.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x = -2.0));
    s
}

fn continuation(cfg: &ExperimentConfig, diag: &mut Diagnostics, artifacts: &mut Vec<Artifact>) -> Result<()> {
    let spec = cfg.coupled_system()?;
    let probes = probe_assumptions(&spec, &cfg.probe)?;
    let monotone = probes.a1_passed && probes.a2.passed;
    let structured = probes.a1_passed && probes.b1.as_ref().is_some_and(|b| b.passed) && probes.b2_passed == Some(true);
    diag.section("assumptions", &probes);
    let expect = |e: Expectation| match e {
        Expectation::Pass => "pass",
        Expectation::Fail => "fail",
        Expectation::Any => "any",
    };
    if cfg.checks.expect_monotone != Expectation::Any {
        diag.check(
            "monotonicity probe outcome",
            cfg.checks.expect_monotone.matches(monotone),
            probes.a2.min_eigenvalue,
            0.0,
            format!("expected {}, probe {}", expect(cfg.checks.expect_monotone), if monotone { "passed" } else { "failed" }),
        );
    }
    if cfg.checks.expect_structured != Expectation::Any {
        let c2 = probes.b1.as_ref().map_or(f64::NAN, |b| b.c2);
        diag.check(
            "structured probe outcome",
            cfg.checks.expect_structured.matches(structured),
            c2,
            0.0,
            format!("expected {}, probe {}", expect(cfg.checks.expect_structured), if structured { "passed" } else { "failed" }),
        );
    }
    if cfg.checks.probe_only {
        return Ok(());
    }

    let paths = cfg.paths()?;
    let solve = cfg.solve_config();
    let (sol, state) = continuation_solve(&spec, &paths, &solve, &cfg.continuation, None)?;
    continuation_checks(diag, &state);
    let (res_y, res_p) = fbdsde_residuals(&spec, &sol, &paths)?;
    diag.section("residuals", json!({ "backward": res_y, "forward": res_p }));
    if cfg.checks.uniqueness {
        let (other, other_state) = continuation_solve(&spec, &paths, &solve, &cfg.continuation, Some(&distant_iterate(&spec, &paths)))?;
        let gaps = sol.w2_gaps(&other, paths.grid.dt)?;
        let tol = state.tolerance.max(other_state.tolerance);
        let worst = gaps.iter().fold(0.0f64, |a, b| a.max(*b));
        diag.section("uniqueness", json!({ "w2_gaps_y_p_z_q": gaps, "tolerance": tol, "second_run": other_state }));
        diag.check(
            "two initial iterates reach the same law",
            other_state.status == ContinuationStatus::Converged && worst <= tol,
            worst,
            tol,
            "largest per-field W2 gap",
        );
    }
    diag.section("continuation", &state);

    let d = spec.dims;
    artifacts.push(csv(
        "solution.csv",
        &[
            Field { name: "y", width: d.n, steps: &sol.y },
            Field { name: "p", width: d.n, steps: &sol.p },
            Field { name: "z", width: d.z_width(), steps: &sol.z },
            Field { name: "q", width: d.g_width(), steps: &sol.q },
        ],
        cfg,
    )?);
    artifacts.push(plot("mean_y.dat", "mean_y", mean_series(&paths, &sol.y, d.n)));
    artifacts.push(plot("mean_p.dat", "mean_p", mean_series(&paths, &sol.p, d.n)));
    artifacts.push(Artifact::new(
        "continuation_alpha.dat",
        ArtifactKind::Plot,
        series("step", "alpha", state.accepted_alphas.iter().enumerate().map(|(i, a)| (i as f64, *a))),
    ));
    artifacts.push(Artifact::new(
        "continuation_displacement.dat",
        ArtifactKind::Plot,
        series("iteration", "displacement", state.displacements.iter().flatten().enumerate().map(|(i, a)| (i as f64, *a))),
    ));
    Ok(())
}

fn max_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs())).fold(0.0f64, f64::max)
}

fn oracle_check(cfg: &ExperimentConfig, diag: &mut Diagnostics, artifacts: &mut Vec<Artifact>) -> Result<()> {
    let grid = build_grid(cfg.grid.horizon, cfg.checks.oracle_steps)?;
    let paths = tree_paths(&grid, 1, 1, cfg.ensemble.tree_cap)?;
    let tree = SolveConfig::tree();
    let n = paths.n_steps();
    let rows = paths.n_particles;
    let tol = cfg.checks.oracle_tol;
    let mut table: Vec<(String, String, f64)> = Vec::new();
    let mut state_pair = |name: &str, spec: &ProblemSpec, u: &Control| -> Result<()> {
        let engine = solve_mf_bdsde(spec, u, &paths, &tree)?;
        let exact = solve_on_tree(spec, u, &paths)?;
        table.push((name.into(), "y".into(), max_gap(&engine.y, &exact.y)));
        table.push((name.into(), "z".into(), max_gap(&engine.z, &exact.z)));
        Ok(())
    };
    state_pair("configured", &cfg.problem_spec(), &cfg.initial_control(&paths))?;
    state_pair("plain", &nonlinear_problem(), &Control::constant(n, rows, &[0.3]))?;
    let mf_linear = CustomLinearParams { f: [1.0, 0.0, 0.0], fbar: [0.5, 0.0, 0.0], ..Default::default() };
    state_pair("mean-field-linear", &mf_linear.problem(Terminal::Constant(vec![1.0]), crate::problem::BoxSet::whole_space(1)), &Control::constant(n, rows, &[0.0]))?;
    let lq = shipped_lq();
    let u = Control::constant(n, rows, &[0.2]);
    state_pair("lq", &lq, &u)?;

    let state = solve_on_tree(&lq, &u, &paths)?;
    let v = Control::constant(n, rows, &[0.5]);
    let var = solve_variational(&lq, &state, &u, &v, &paths, &tree)?;
    let var_exact = solve_variational_on_tree(&lq, &state, &u, &v, &paths)?;
    table.push(("variational".into(), "y".into(), max_gap(&var.y, &var_exact.y)));
    table.push(("variational".into(), "z".into(), max_gap(&var.z, &var_exact.z)));
    let adj = solve_adjoint(&lq, &state, &u, &paths, &tree)?;
    let adj_exact = solve_adjoint_on_tree(&lq, &state, &u, &paths)?;
    table.push(("adjoint".into(), "p".into(), max_gap(&adj.p, &adj_exact.p)));
    table.push(("adjoint".into(), "q".into(), max_gap(&adj.q, &adj_exact.q)));

    let system = monotone_system();
    let inner = InnerConfig { tol: 1e-14, max_iter: 200, ..Default::default() };
    let (alpha0, _) = solve_alpha0(&system, &paths, &tree, &inner, None)?;
    let alpha0_exact = solve_alpha0_on_tree(&system, &paths)?;
    for (field, a, b) in [("y", &alpha0.y, &alpha0_exact.y), ("p", &alpha0.p, &alpha0_exact.p), ("z", &alpha0.z, &alpha0_exact.z), ("q", &alpha0.q, &alpha0_exact.q)] {
        table.push(("alpha-0-system".into(), field.into(), max_gap(a, b)));
    }

    let mut wtr = ::csv::Writer::from_writer(Vec::new());
    let io = |e: ::csv::Error| Error::Io { path: "<oracle table>".into(), message: e.to_string() };
    wtr.write_record(["instance", "field", "max_abs_gap", "tolerance", "passed"]).map_err(io)?;
    for (inst, field, gap) in &table {
        let ok = *gap <= tol;
        wtr.write_record(&[inst.clone(), field.clone(), format!("{gap:e}"), format!("{tol:e}"), ok.to_string()]).map_err(io)?;
        diag.check(&format!("tree oracle: {inst} {field}"), ok, *gap, tol, "max absolute gap to backward induction");
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io { path: "<oracle table>".into(), message: e.to_string() })?;
    diag.section("oracle", json!({ "n_steps": n, "nodes": rows, "rows": table }));
    artifacts.push(Artifact::new("oracle_table.csv", ArtifactKind::Csv, bytes));
    Ok(())
}
