use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{file_err, Result};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// File names relative to the output directory.
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(file_err(&tmp))?;
    fs::rename(&tmp, path).map_err(file_err(path))
}

/// Collects stage timings and output files for one command.
pub struct Recorder {
    out_dir: PathBuf,
    manifest: RunManifest,
    current: Option<(String, Instant, Vec<String>)>,
}

impl Recorder {
    pub fn new(out_dir: &Path, command: &str, config_bytes: &[u8], seed: u64) -> Self {
        Self {
            out_dir: out_dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                artifact_version: ARTIFACT_VERSION.to_string(),
                config_sha256: sha256_hex(config_bytes),
                seed,
                stages: Vec::new(),
            },
            current: None,
        }
    }

    pub fn stage(&mut self, name: &str) {
        self.close();
        self.current = Some((name.to_string(), Instant::now(), Vec::new()));
    }

    fn close(&mut self) {
        if let Some((name, start, outputs)) = self.current.take() {
            self.manifest.stages.push(StageRecord {
                name,
                outputs,
                wall_clock_secs: start.elapsed().as_secs_f64(),
            });
        }
    }

    /// Writes `bytes` to `out_dir/name` and lists it under the open stage.
    pub fn output(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(name);
        write_atomic(&path, bytes)?;
        if self.current.is_none() {
            self.stage("write");
        }
        self.current.as_mut().expect("open stage").2.push(name.to_string());
        Ok(path)
    }

    pub fn manifest_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    pub fn finish(mut self) -> Result<RunManifest> {
        self.close();
        let name = Self::manifest_name(&self.manifest.command);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        write_atomic(&self.out_dir.join(name), json.as_bytes())?;
        Ok(self.manifest)
    }
}
