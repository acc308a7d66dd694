//! One `manifest.json` per output directory, enough to re-run the command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub argv: Vec<String>,
    /// Working directory the arguments are relative to.
    pub cwd: PathBuf,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub build: String,
    /// Input path (as given) -> sha256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub elapsed_secs: f64,
}

pub fn build_id() -> String {
    format!("{} ({})", env!("CARGO_PKG_VERSION"), env!("ALOPE_GIT_DESCRIBE"))
}

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Tracks inputs and outputs of a command while it runs.
pub struct Recorder {
    pub out: PathBuf,
    command: &'static str,
    argv: Vec<String>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    started: SystemTime,
}

impl Recorder {
    pub fn new(command: &'static str, out: &Path, argv: &[String]) -> Result<Self, Failure> {
        Ok(Recorder {
            out: out.to_path_buf(),
            command,
            argv: argv.to_vec(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started: SystemTime::now(),
        })
    }

    /// Hashes an input. A missing file is a usage error naming the path.
    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        if !path.exists() {
            return Err(Failure::usage(format!("input not found: {}", path.display())));
        }
        if path.is_dir() {
            for entry in walk(path)? {
                self.inputs.insert(entry.display().to_string(), sha256_file(&entry)?);
            }
        } else {
            self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        }
        Ok(())
    }

    /// Creates the output directory; nothing is created before a command has results.
    pub fn ensure_dir(&self) -> Result<(), Failure> {
        std::fs::create_dir_all(&self.out).map_err(|e| Failure::runtime(format!("{}: {e}", self.out.display())))
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Writes `bytes` atomically to `out/name` and records it.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
        }
        alope::write_atomic(&path, bytes)?;
        self.record(name);
        Ok(())
    }

    /// Records a file some other writer already produced.
    pub fn record(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    pub fn finish(mut self, config: serde_json::Value, seed: Option<u64>) -> Result<(), Failure> {
        let cwd = std::env::current_dir().map_err(|e| Failure::runtime(format!("current dir: {e}")))?;
        self.outputs.sort();
        self.ensure_dir()?;
        let manifest = RunManifest {
            command: self.command.to_string(),
            argv: self.argv,
            cwd,
            config,
            seed,
            build: build_id(),
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix: self.started.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            elapsed_secs: self.started.elapsed().unwrap_or(Duration::ZERO).as_secs_f64(),
        };
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        alope::write_atomic(&self.out.join(MANIFEST_FILE), &json)?;
        Ok(())
    }
}

fn walk(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| Failure::runtime(format!("{}: {e}", d.display())))?;
        for e in entries {
            let p = e.map_err(|e| Failure::runtime(format!("{}: {e}", d.display())))?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn read(path: &Path) -> Result<RunManifest, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::usage(format!("cannot read manifest {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::usage(format!("{}: not a run manifest: {e}", path.display())))
}
