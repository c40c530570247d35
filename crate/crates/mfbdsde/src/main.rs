use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use mfbdsde::config::{parse_config, ExperimentConfig};
use mfbdsde::pipeline::{run_experiment, Command};
use mfbdsde::report::{file_entries, read_config_source, sha256_hex, write_run, ConfigSource, RunManifest, RunStatus, SCHEMA_VERSION};

/// Solvers and verification harness for mean-field backward doubly stochastic control.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML configuration, or a manifest.json of an earlier run to replay it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the ensemble seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "MFBDSDE_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Solve the state equation at the initial control.
    Simulate,
    /// Check the derivative routes and run the projected-gradient optimizer.
    Optimize,
    /// Solve a coupled forward-backward system by continuation.
    Continuation,
    /// Compare the optimizer with the closed-form LQ control.
    LqVerify,
    /// Compare tree-exact solvers with backward induction on a Bernoulli tree.
    OracleCheck,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Simulate => Command::Simulate,
            Cmd::Optimize => Command::Optimize,
            Cmd::Continuation => Command::Continuation,
            Cmd::LqVerify => Command::LqVerify,
            Cmd::OracleCheck => Command::OracleCheck,
        }
    }
}

fn load_config(cli: &Cli, command: Command) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        None => ExperimentConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let toml = match read_config_source(&text)? {
                ConfigSource::Toml(t) => t,
                ConfigSource::Manifest(m) => {
                    if m.command != command.name() {
                        bail!("manifest records command `{}`, not `{}`", m.command, command.name());
                    }
                    m.config
                }
            };
            parse_config(&toml)?
        }
    };
    if let Some(seed) = cli.seed {
        cfg.ensemble.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.display().to_string();
    }
    mfbdsde::config::validate(&cfg)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command = Command::from(cli.command);
    // Before anything touches the default pool, including config validation.
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let cfg = match load_config(&cli, command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };

    let config_text = cfg.to_toml();
    let started = Instant::now();
    let result = run_experiment(command, &cfg);
    let mut manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        command: command.name().into(),
        seed: cfg.ensemble.seed,
        config_sha256: sha256_hex(config_text.as_bytes()),
        solver_version: env!("CARGO_PKG_VERSION").into(),
        threads: rayon::current_num_threads(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        status: RunStatus::Error,
        error: None,
        failed_checks: Vec::new(),
        files: Vec::new(),
        config: config_text,
    };
    let dir = PathBuf::from(&cfg.output.dir);
    let (artifacts, code) = match result {
        Ok(out) => {
            for c in &out.diagnostics.checks {
                println!("{} {}: {:e} (threshold {:e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
            }
            manifest.failed_checks = out.diagnostics.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
            manifest.status = if out.passed() { RunStatus::Passed } else { RunStatus::Failed };
            let code = if out.passed() { 0 } else { 1 };
            (out.artifacts, code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            manifest.error = Some(e.to_string());
            (Vec::new(), 2)
        }
    };
    manifest.files = file_entries(&artifacts);
    if let Err(e) = write_run(&dir, &artifacts, &manifest) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    println!("{:?}: outputs in {}", manifest.status, dir.display());
    ExitCode::from(code)
}
