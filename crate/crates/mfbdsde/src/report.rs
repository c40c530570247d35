//! Report emission: solution CSV, versioned diagnostics JSON, plot series and
//! the run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Version of the diagnostics and manifest schemas.
pub const SCHEMA_VERSION: u32 = 1;

/// One pass/fail comparison of a measured value against a threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

/// Diagnostics document: named free-form sections plus the list of checks.
///
/// Schema (version 1): `{schema_version, command, seed, sections: {name: any}, checks: [Check]}`.
/// Non-finite numbers are written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub sections: BTreeMap<String, serde_json::Value>,
    pub checks: Vec<Check>,
}

impl Diagnostics {
    pub fn new(command: &str, seed: u64) -> Self {
        Diagnostics { schema_version: SCHEMA_VERSION, command: command.into(), seed, sections: BTreeMap::new(), checks: Vec::new() }
    }

    pub fn section(&mut self, name: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("diagnostic sections serialize");
        self.sections.insert(name.into(), v);
    }

    pub fn check(&mut self, name: &str, passed: bool, value: f64, threshold: f64, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, value, threshold, detail: detail.into() });
    }

    /// True iff every recorded check passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("diagnostics serialize");
        out.push(b'\n');
        out
    }
}

/// A time-major ensemble field: `steps[i]` holds `N x width` values.
pub struct Field<'a> {
    pub name: &'a str,
    pub width: usize,
    pub steps: &'a [Vec<f64>],
}

/// Solution CSV with columns `particle, step, field, coordinate, value`,
/// restricted to the first `max_particles` particles.
pub fn solution_csv(fields: &[Field], max_particles: usize) -> Result<Vec<u8>> {
    let io = |e: csv::Error| Error::Io { path: "<solution csv>".into(), message: e.to_string() };
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["particle", "step", "field", "coordinate", "value"]).map_err(io)?;
    for f in fields {
        for (i, step) in f.steps.iter().enumerate() {
            let rows = if f.width == 0 { 0 } else { step.len() / f.width };
            for p in 0..rows.min(max_particles) {
                for c in 0..f.width {
                    let v = step[p * f.width + c];
                    wtr.write_record(&[p.to_string(), i.to_string(), f.name.into(), c.to_string(), format!("{v:e}")])
                        .map_err(io)?;
                }
            }
        }
    }
    wtr.into_inner().map_err(|e| Error::Io { path: "<solution csv>".into(), message: e.to_string() })
}

/// Two-column whitespace-separated series with a `#` header line.
pub fn series(x_label: &str, y_label: &str, points: impl IntoIterator<Item = (f64, f64)>) -> Vec<u8> {
    let mut s = format!("# {x_label} {y_label}\n");
    for (x, y) in points {
        writeln!(s, "{x:e} {y:e}").expect("writing to a string");
    }
    s.into_bytes()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    Csv,
    Json,
    Plot,
}

/// An output file held in memory until the run is persisted.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub kind: ArtifactKind,
    pub bytes: Vec<u8>,
}

impl Artifact {
    pub fn new(name: &str, kind: ArtifactKind, bytes: Vec<u8>) -> Self {
        Artifact { name: name.into(), kind, bytes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Passed,
    Failed,
    Error,
}

/// Self-contained record of a run. Passing it back as `--config` replays the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    /// SHA-256 of `config`.
    pub config_sha256: String,
    pub solver_version: String,
    pub threads: usize,
    pub wall_clock_seconds: f64,
    pub status: RunStatus,
    pub error: Option<String>,
    pub failed_checks: Vec<String>,
    pub files: Vec<FileEntry>,
    /// The fully resolved configuration, defaults and overrides included.
    pub config: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").expect("writing to a string");
        s
    })
}

pub fn file_entries(artifacts: &[Artifact]) -> Vec<FileEntry> {
    artifacts.iter().map(|a| FileEntry { name: a.name.clone(), sha256: sha256_hex(&a.bytes), bytes: a.bytes.len() }).collect()
}

/// Write every artifact and `manifest.json` into `dir`.
pub fn write_run(dir: &Path, artifacts: &[Artifact], manifest: &RunManifest) -> Result<()> {
    let io = |path: &Path, e: std::io::Error| Error::Io { path: path.display().to_string(), message: e.to_string() };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for a in artifacts {
        let path = dir.join(&a.name);
        std::fs::write(&path, &a.bytes).map_err(|e| io(&path, e))?;
    }
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    text.push(b'\n');
    std::fs::write(&path, text).map_err(|e| io(&path, e))
}

/// A configuration source: plain TOML, or a manifest whose embedded
/// configuration is replayed under its recorded command.
pub enum ConfigSource {
    Toml(String),
    Manifest(RunManifest),
}

pub fn read_config_source(text: &str) -> Result<ConfigSource> {
    if text.trim_start().starts_with('{') {
        let m: RunManifest = serde_json::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        return Ok(ConfigSource::Manifest(m));
    }
    Ok(ConfigSource::Toml(text.to_string()))
}
