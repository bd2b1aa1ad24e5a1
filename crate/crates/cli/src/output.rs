//! Atomic output writing and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use holetrap::constants::{registry, Provenance};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to a temporary sibling of `path`, syncs it and renames it
/// into place, so readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("output");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let ctx = || format!("writing {}", path.display());
    let mut f = fs::File::create(&tmp).map_err(CliError::io(ctx()))?;
    f.write_all(bytes).map_err(CliError::io(ctx()))?;
    f.sync_all().map_err(CliError::io(ctx()))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::io(ctx())(e)
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

/// The output directory of one run.
pub struct Outputs {
    dir: PathBuf,
    records: Vec<OutputRecord>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            records: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        atomic_write(&self.dir.join(name), bytes)?;
        self.records.retain(|r| r.path != name);
        self.records.push(OutputRecord {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    /// Renders with `render` into memory, then writes atomically.
    pub fn write_with<F>(&mut self, name: &str, render: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    {
        let mut buf = Vec::new();
        render(&mut buf).map_err(CliError::io(format!("rendering {name}")))?;
        self.write(name, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn records(&self) -> &[OutputRecord] {
        &self.records
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConstantEntry {
    pub name: String,
    pub value: f64,
    pub unit: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub profile: String,
    /// Unix seconds; `SOURCE_DATE_EPOCH` when set.
    pub timestamp: u64,
    pub defaulted: Vec<String>,
    pub outputs: Vec<OutputRecord>,
    pub constants_version: u32,
    pub constants: Vec<ConstantEntry>,
}

impl Manifest {
    pub fn new(command: &str, config_text: &str, seed: u64, profile: &str, defaulted: &[String], outputs: &Outputs) -> Self {
        let reg = registry();
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            seed,
            profile: profile.to_string(),
            timestamp: timestamp(),
            defaulted: defaulted.to_vec(),
            outputs: outputs.records().to_vec(),
            constants_version: reg.version,
            constants: reg
                .iter()
                .map(|c| ConstantEntry {
                    name: c.name.clone(),
                    value: c.value,
                    unit: c.unit.clone(),
                    provenance: c.provenance,
                })
                .collect(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        atomic_write(&dir.join(MANIFEST), text.as_bytes())
    }
}

fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok()) {
        return t;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}
