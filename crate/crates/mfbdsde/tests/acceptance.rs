//! End-to-end acceptance run over the shipped configurations.
//!
//! Every job runs twice, on a one-thread and a four-thread pool. One line per
//! criterion is written straight to stdout so it shows even when output
//! capture is on.

use std::io::Write;
use std::time::{Duration, Instant};

use mfbdsde::config::{parse_config, ExperimentConfig};
use mfbdsde::pipeline::{run_experiment, Command, RunOutput};

struct Job {
    label: &'static str,
    command: Command,
    config: &'static str,
    adjust: fn(&mut ExperimentConfig),
    /// Check-name prefixes that must be present, so a criterion never passes vacuously.
    required: &'static [&'static str],
}

struct Criterion {
    id: u32,
    title: &'static str,
    jobs: Vec<Job>,
    /// Wall-clock bound on the single-thread run of every job.
    time_limit: Option<Duration>,
}

fn keep(_: &mut ExperimentConfig) {}

fn probe_only(cfg: &mut ExperimentConfig) {
    cfg.checks.probe_only = true;
}

fn job(label: &'static str, command: Command, config: &'static str, required: &'static [&'static str]) -> Job {
    Job { label, command, config, adjust: keep, required }
}

fn criteria() -> Vec<Criterion> {
    use Command::*;
    vec![
        Criterion {
            id: 1,
            title: "martingale case within tolerance in 10 s on one thread",
            jobs: vec![job("martingale", Simulate, include_str!("../configs/martingale.toml"), &["y matches offset + slope W", "z matches slope"])],
            time_limit: Some(Duration::from_secs(10)),
        },
        Criterion {
            id: 2,
            title: "backward-noise case, tree-exact and Monte Carlo",
            jobs: vec![
                job("backward noise tree", Simulate, include_str!("../configs/backward_noise_tree.toml"), &["y matches offset + g0", "z vanishes"]),
                job("backward noise mc", Simulate, include_str!("../configs/backward_noise_mc.toml"), &["y matches offset + g0", "z vanishes"]),
            ],
            time_limit: None,
        },
        Criterion {
            id: 3,
            title: "mean-field linear case against the exponential",
            jobs: vec![job("mean-field exponential", Simulate, include_str!("../configs/mean_field_exponential.toml"), &["mean y0 matches the exponential"])],
            time_limit: None,
        },
        Criterion {
            id: 4,
            title: "tree-exact solvers match backward induction",
            jobs: vec![job(
                "oracle",
                OracleCheck,
                include_str!("../configs/oracle.toml"),
                &[
                    "tree oracle: plain",
                    "tree oracle: mean-field-linear",
                    "tree oracle: lq",
                    "tree oracle: variational",
                    "tree oracle: adjoint",
                    "tree oracle: alpha-0-system",
                ],
            )],
            time_limit: None,
        },
        Criterion {
            id: 5,
            title: "Ito and product-rule sign checks",
            jobs: vec![job("ito signs", Simulate, include_str!("../configs/ito_signs.toml"), &["Ito square with backward correction", "product rule cross term"])],
            time_limit: None,
        },
        Criterion {
            id: 6,
            title: "variational, adjoint and finite-difference derivatives agree",
            jobs: vec![job(
                "gradient",
                Optimize,
                include_str!("../configs/gradient.toml"),
                &["variational and adjoint derivatives agree", "adjoint derivative matches central differences"],
            )],
            time_limit: None,
        },
        Criterion {
            id: 7,
            title: "optimizer matches the closed-form LQ control and no perturbation beats it",
            jobs: vec![job(
                "lq verify",
                LqVerify,
                include_str!("../configs/lq_verify.toml"),
                &["optimizer converged", "optimizer and closed-form costs agree", "no admissible perturbation beats the candidate"],
            )],
            time_limit: None,
        },
        Criterion {
            id: 8,
            title: "variational quotient error strictly decreases with eps",
            jobs: vec![job("variational", Optimize, include_str!("../configs/variational.toml"), &["variational quotient error decreases with eps"])],
            time_limit: None,
        },
        Criterion {
            id: 9,
            title: "continuation reaches alpha = 1 with a unique limit",
            jobs: vec![
                job(
                    "continuation monotone",
                    Continuation,
                    include_str!("../configs/continuation_monotone.toml"),
                    &["continuation reached alpha = 1", "recorded contraction ratios below one", "two initial iterates reach the same law"],
                ),
                job(
                    "continuation lq",
                    Continuation,
                    include_str!("../configs/continuation_lq.toml"),
                    &["continuation reached alpha = 1", "recorded contraction ratios below one", "two initial iterates reach the same law"],
                ),
            ],
            time_limit: None,
        },
        Criterion {
            id: 10,
            title: "structured probes pass without E[u], monotonicity probe fails with it",
            jobs: vec![
                Job {
                    label: "probes lq",
                    command: Continuation,
                    config: include_str!("../configs/continuation_lq.toml"),
                    adjust: probe_only,
                    required: &["structured probe outcome"],
                },
                job("probes mean control", Continuation, include_str!("../configs/probes_mean_control.toml"), &["monotonicity probe outcome"]),
            ],
            time_limit: None,
        },
    ]
}

struct Outcome {
    result: Result<RunOutput, String>,
    elapsed: Duration,
}

fn run(threads: usize, j: &Job) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
    pool.install(|| {
        let started = Instant::now();
        let result = parse_config(j.config).map_err(|e| e.to_string()).and_then(|mut cfg| {
            (j.adjust)(&mut cfg);
            run_experiment(j.command, &cfg).map_err(|e| e.to_string())
        });
        Outcome { result, elapsed: started.elapsed() }
    })
}

/// Problems with one job, empty when it meets its criterion.
fn job_problems(j: &Job, o: &Outcome, limit: Option<Duration>) -> Vec<String> {
    let out = match &o.result {
        Ok(out) => out,
        Err(e) => return vec![format!("{}: error: {e}", j.label)],
    };
    let mut problems = Vec::new();
    for c in out.diagnostics.checks.iter().filter(|c| !c.passed) {
        problems.push(format!("{}: {} = {:e} against {:e}", j.label, c.name, c.value, c.threshold));
    }
    for r in j.required {
        if !out.diagnostics.checks.iter().any(|c| c.name.starts_with(r)) {
            problems.push(format!("{}: missing check `{r}`", j.label));
        }
    }
    if let Some(limit) = limit {
        if o.elapsed > limit {
            problems.push(format!("{}: took {:.2} s", j.label, o.elapsed.as_secs_f64()));
        }
    }
    problems
}

fn same_outputs(a: &Outcome, b: &Outcome) -> bool {
    match (&a.result, &b.result) {
        (Ok(x), Ok(y)) => x.artifacts == y.artifacts,
        (Err(x), Err(y)) => x == y,
        _ => false,
    }
}

fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").expect("stdout");
    out.flush().expect("stdout");
}

#[test]
fn acceptance_criteria() {
    let mut failed = Vec::new();
    let mut mismatched = Vec::new();
    for c in criteria() {
        let mut problems = Vec::new();
        let mut seconds = 0.0;
        for j in &c.jobs {
            let single = run(1, j);
            let multi = run(4, j);
            seconds += single.elapsed.as_secs_f64();
            problems.extend(job_problems(j, &single, c.time_limit));
            if !same_outputs(&single, &multi) {
                mismatched.push(format!("{} (criterion {})", j.label, c.id));
            }
        }
        let verdict = if problems.is_empty() { "PASS" } else { "FAIL" };
        report(&format!("criterion {:>2} {verdict}: {} [{seconds:.2} s on one thread]", c.id, c.title));
        for p in &problems {
            report(&format!("    {p}"));
        }
        if !problems.is_empty() {
            failed.push(c.id);
        }
    }
    if mismatched.is_empty() {
        report("criterion 11 PASS: outputs identical on one and four threads for every run above");
    } else {
        report(&format!("criterion 11 FAIL: outputs differ between one and four threads for {}", mismatched.join(", ")));
        failed.push(11);
    }
    assert!(failed.is_empty(), "failed acceptance criteria: {failed:?}");
}
