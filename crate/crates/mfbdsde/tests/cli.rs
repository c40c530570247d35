use std::path::Path;
use std::process::Command;

use mfbdsde::config::{parse_config, ExperimentConfig, ProblemKind};
use mfbdsde::report::{read_config_source, solution_csv, ConfigSource, Diagnostics, Field, RunManifest, RunStatus, SCHEMA_VERSION};

fn config_error(text: &str) -> String {
    match parse_config(text) {
        Ok(_) => panic!("expected a configuration error for:\n{text}"),
        Err(e) => e.to_string(),
    }
}

#[test]
fn empty_config_is_the_default() {
    assert_eq!(parse_config("").unwrap(), ExperimentConfig::default());
    let cfg = parse_config("[ensemble]\nparticles = 64\n").unwrap();
    assert_eq!(cfg.ensemble.particles, 64);
    assert_eq!(cfg.grid, ExperimentConfig::default().grid);
}

#[test]
fn resolved_config_round_trips() {
    let mut cfg = ExperimentConfig::default();
    cfg.problem.kind = ProblemKind::Scalar;
    cfg.ensemble.seed = 77;
    cfg.grid.n_steps = 7;
    cfg.checks.variational_eps = vec![0.2, 0.1];
    assert_eq!(parse_config(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn non_positive_h3_is_rejected() {
    let msg = config_error("[problem]\nkind = \"lq\"\n[problem.lq]\nh = [0.0, 0.0, 0.0]\n");
    assert!(msg.contains("h3 > 0"), "{msg}");
}

#[test]
fn misspelled_key_gets_a_suggestion() {
    let msg = config_error("[ensemble]\nparticels = 10\n");
    assert!(msg.contains("ensemble.particels"), "{msg}");
    assert!(msg.contains("did you mean `particles`"), "{msg}");
}

#[test]
fn unknown_section_is_rejected() {
    let msg = config_error("[ensembel]\nparticles = 10\n");
    assert!(msg.contains("ensembel"), "{msg}");
}

#[test]
fn type_mismatch_is_rejected() {
    let msg = config_error("[ensemble]\nparticles = \"many\"\n");
    assert!(msg.contains("particles") || msg.contains("invalid type"), "{msg}");
}

#[test]
fn strong_z_coupling_violates_the_contraction_condition() {
    let msg = config_error("[problem]\nkind = \"scalar\"\n[problem.scalar]\ng = [0.2, 1.5, 0.3]\n");
    assert!(msg.contains("H1: alpha1"), "{msg}");
}

#[test]
fn all_validation_errors_are_reported_together() {
    let msg = config_error("[grid]\nn_steps = 0\n[ensemble]\nparticles = 0\n");
    assert!(msg.lines().count() >= 2, "{msg}");
    assert!(msg.contains("n_steps"), "{msg}");
    assert!(msg.contains("particles"), "{msg}");
}

#[test]
fn empty_diagnostics_schema() {
    let d = Diagnostics::new("simulate", 3);
    let v: serde_json::Value = serde_json::from_slice(&d.to_json()).unwrap();
    assert_eq!(v["schema_version"], SCHEMA_VERSION);
    assert_eq!(v["command"], "simulate");
    assert_eq!(v["seed"], 3);
    assert!(v["sections"].as_object().unwrap().is_empty());
    assert!(v["checks"].as_array().unwrap().is_empty());
    assert!(d.passed());
}

#[test]
fn solution_csv_has_fixed_columns() {
    let y = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
    let z = vec![vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]];
    let bytes = solution_csv(
        &[Field { name: "y", width: 1, steps: &y }, Field { name: "z", width: 2, steps: &z }],
        2,
    )
    .unwrap();
    let mut rdr = csv::Reader::from_reader(bytes.as_slice());
    assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), ["particle", "step", "field", "coordinate", "value"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    // Two steps of two y particles, then one step of two particles with two z coordinates.
    assert_eq!(rows.len(), 4 + 4);
    assert!(rows.iter().all(|r| r.len() == 5));
    assert_eq!(rows[4].iter().collect::<Vec<_>>(), ["0", "0", "z", "0", "1e-1"]);
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mfbdsde"))
}

fn configs() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/configs"))
}

fn read_manifest(dir: &Path) -> RunManifest {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn oracle_check_passes_and_writes_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let status = bin()
        .args(["oracle-check", "--config"])
        .arg(configs().join("oracle.toml"))
        .arg("--out")
        .arg(&out)
        .env("MFBDSDE_THREADS", "2")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let m = read_manifest(&out);
    assert_eq!(m.status, RunStatus::Passed);
    assert_eq!(m.threads, 2);
    assert!(m.files.iter().any(|f| f.name == "oracle_table.csv"));
    for f in &m.files {
        let bytes = std::fs::read(out.join(&f.name)).unwrap();
        assert_eq!(mfbdsde::report::sha256_hex(&bytes), f.sha256, "{}", f.name);
    }
}

#[test]
fn invalid_config_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, "[ensemble]\nparticels = 10\n").unwrap();
    let output = bin().args(["simulate", "--config"]).arg(&path).arg("--out").arg(tmp.path().join("o")).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("did you mean `particles`"));
}

#[test]
fn failed_check_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("tight.toml");
    // A tolerance no Monte Carlo estimate can meet.
    std::fs::write(
        &path,
        "[problem]\nkind = \"custom-linear\"\nterminal = { offset = 0.0, slope = 1.0 }\n\
         [grid]\nn_steps = 4\n[ensemble]\nparticles = 200\n\
         [checks]\nreference = \"martingale\"\ny_tol = 1e-12\nz_tol = 1e-12\n",
    )
    .unwrap();
    let out = tmp.path().join("o");
    let status = bin().args(["simulate", "--config"]).arg(&path).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(1));
    let m = read_manifest(&out);
    assert_eq!(m.status, RunStatus::Failed);
    assert!(!m.failed_checks.is_empty());
}

#[test]
fn manifest_replay_reproduces_every_file() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("small.toml");
    std::fs::write(&path, "[grid]\nn_steps = 5\n[ensemble]\nparticles = 300\n[problem]\nkind = \"scalar\"\n").unwrap();
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    let status = bin()
        .args(["simulate", "--seed", "11", "--threads", "1", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&first)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let status = bin()
        .args(["simulate", "--threads", "3", "--config"])
        .arg(first.join("manifest.json"))
        .arg("--out")
        .arg(&second)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let (a, b) = (read_manifest(&first), read_manifest(&second));
    assert_eq!(a.seed, 11);
    // Only the output directory was overridden.
    let (mut ca, cb) = (parse_config(&a.config).unwrap(), parse_config(&b.config).unwrap());
    ca.output.dir = cb.output.dir.clone();
    assert_eq!(ca, cb);
    assert_eq!(a.files, b.files);
    for f in &a.files {
        assert_eq!(std::fs::read(first.join(&f.name)).unwrap(), std::fs::read(second.join(&f.name)).unwrap(), "{}", f.name);
    }
    match read_config_source(&std::fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap() {
        ConfigSource::Manifest(m) => assert_eq!(parse_config(&m.config).unwrap().ensemble.seed, 11),
        ConfigSource::Toml(_) => panic!("manifest not recognised"),
    }
}

#[test]
fn replay_under_another_command_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    let status = bin()
        .args(["oracle-check", "--config"])
        .arg(configs().join("oracle.toml"))
        .arg("--out")
        .arg(&first)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let output = bin().args(["simulate", "--config"]).arg(first.join("manifest.json")).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("oracle-check"));
}
