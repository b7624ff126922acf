//! Run manifest: config hash, artifact version, per-stage wall clock, and a
//! checksummed inventory of every file the run produced.

use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct RunManifest {
    config_hash: String,
    stages: Vec<(String, f64)>,
    files: Vec<(String, String)>,
    started: Instant,
    stage_started: Instant,
    out_dir: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").unwrap();
    }
    out
}

impl RunManifest {
    pub fn new(config_text: &str, out_dir: &Path) -> Self {
        let now = Instant::now();
        Self {
            config_hash: sha256_hex(config_text.as_bytes()),
            stages: Vec::new(),
            files: Vec::new(),
            started: now,
            stage_started: now,
            out_dir: out_dir.to_path_buf(),
        }
    }

    /// Closes the current stage under `name` and starts the next one.
    pub fn finish_stage(&mut self, name: &str) {
        let now = Instant::now();
        self.stages.push((name.to_string(), now.duration_since(self.stage_started).as_secs_f64()));
        self.stage_started = now;
    }

    /// Writes `name` into the output directory and records its checksum.
    pub fn write_file(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, String> {
        let path = self.out_dir.join(name);
        std::fs::write(&path, bytes)
            .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
        self.files.push((name.to_string(), sha256_hex(bytes)));
        Ok(path)
    }

    /// Writes `manifest.txt` (structured text, not part of the checksummed
    /// inventory because it contains wall-clock times).
    pub fn finalize(&self) -> Result<(), String> {
        let mut text = String::new();
        writeln!(text, "artifact_version = {ARTIFACT_VERSION}").unwrap();
        writeln!(text, "config_sha256 = {}", self.config_hash).unwrap();
        writeln!(text, "total_seconds = {:.3}", self.started.elapsed().as_secs_f64()).unwrap();
        writeln!(text, "\n[stages]").unwrap();
        for (name, secs) in &self.stages {
            writeln!(text, "{name} = {secs:.3}").unwrap();
        }
        writeln!(text, "\n[files]").unwrap();
        for (name, hash) in &self.files {
            writeln!(text, "{name} = sha256:{hash}").unwrap();
        }
        let path = self.out_dir.join("manifest.txt");
        std::fs::write(&path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
    }
}
