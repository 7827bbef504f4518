//! Run manifests: one JSON line per run appended to `manifests.jsonl` in
//! the run's output directory. Existing lines are never rewritten.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sedan_core::io::city_dirs;
use sedan_core::rng::{derive_seed, Stream};

use crate::config::Config;

pub const MANIFEST_FILE: &str = "manifests.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub started_unix: u64,
    pub config: Config,
    pub master_seed: u64,
    /// Derived seeds of the streams this command draws from.
    pub seeds: BTreeMap<String, u64>,
    pub timings: Vec<Timing>,
    pub checkpoint: Option<String>,
    pub datasets: Vec<DatasetRef>,
    pub artifacts: Vec<Artifact>,
    /// Command-specific facts worth keeping next to the numbers
    /// (scenario, fitted parameters, counts).
    pub notes: serde_json::Value,
}

/// Collects everything a manifest records while a command runs.
pub struct Run {
    manifest: RunManifest,
    out: PathBuf,
    clock: Instant,
}

impl Run {
    pub fn start(command: &str, cfg: &Config, out: &Path) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Ok(Self {
            manifest: RunManifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                argv: std::env::args().collect(),
                started_unix,
                config: cfg.clone(),
                master_seed: cfg.seed,
                seeds: BTreeMap::new(),
                timings: Vec::new(),
                checkpoint: None,
                datasets: Vec::new(),
                artifacts: Vec::new(),
                notes: serde_json::Value::Object(Default::default()),
            },
            out: out.to_path_buf(),
            clock: Instant::now(),
        })
    }

    /// Records the derived seed of `stream` at `index`.
    pub fn seed(&mut self, stream: Stream, index: u64) {
        let key = format!("{stream:?}[{index}]");
        self.manifest.seeds.insert(key, derive_seed(self.manifest.master_seed, stream, index));
    }

    pub fn phase<T>(&mut self, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.manifest.timings.push(Timing { phase: name.to_string(), seconds: start.elapsed().as_secs_f64() });
        Ok(out)
    }

    pub fn dataset(&mut self, root: &Path) -> Result<()> {
        self.manifest.datasets.push(DatasetRef { path: root.display().to_string(), sha256: dataset_hash(root)? });
        Ok(())
    }

    pub fn checkpoint(&mut self, path: &Path) {
        self.manifest.checkpoint = Some(path.display().to_string());
    }

    /// Hashes a written file and lists it, relative to the output directory
    /// when it lies inside it.
    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        let shown = path.strip_prefix(&self.out).unwrap_or(path);
        self.manifest.artifacts.push(Artifact {
            path: shown.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        let v = serde_json::to_value(value)?;
        if let serde_json::Value::Object(m) = &mut self.manifest.notes {
            m.insert(key.to_string(), v);
        }
        Ok(())
    }

    /// Appends the manifest line and returns the manifest.
    pub fn finish(mut self) -> Result<RunManifest> {
        self.manifest.timings.push(Timing { phase: "total".into(), seconds: self.clock.elapsed().as_secs_f64() });
        let path = self.out.join(MANIFEST_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        writeln!(f, "{}", serde_json::to_string(&self.manifest)?)?;
        Ok(self.manifest)
    }
}

/// SHA-256 over every file of every city directory, in sorted path order,
/// each prefixed by its path relative to `root`.
pub fn dataset_hash(root: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for dir in city_dirs(root)? {
        let mut files: Vec<PathBuf> =
            fs::read_dir(&dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
        files.sort();
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0u8]);
            h.update(fs::read(&f)?);
        }
    }
    Ok(hex::encode(h.finalize()))
}
