//! Layered settings (flags > config file > defaults) and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// A bad flag, config value or manifest; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Usage(pub String);

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Reads the `[section]` table of a TOML config file as JSON.
pub fn file_section(path: Option<&Path>, section: &str) -> Result<Map<String, Value>> {
    let Some(path) = path else { return Ok(Map::new()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
    match table.get(section) {
        None => Ok(Map::new()),
        Some(toml::Value::Table(t)) => match serde_json::to_value(t)? {
            Value::Object(m) => Ok(m),
            _ => unreachable!(),
        },
        Some(_) => Err(usage(format!("config {}: [{section}] must be a table", path.display()))),
    }
}

/// Overlays set flags on the config-file section and fills the rest from
/// `C::default()`.
pub fn resolve<A: Serialize, C: DeserializeOwned>(flags: &A, mut base: Map<String, Value>) -> Result<C> {
    if let Value::Object(set) = serde_json::to_value(flags)? {
        for (k, v) in set {
            if !v.is_null() {
                base.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(base)).map_err(|e| usage(format!("invalid settings: {e}")))
}

pub fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).with_context(|| format!("resolving {}", path.display()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timing {
    pub wall_ms: f64,
    /// Serial wall time per generated image, if the command generated any.
    pub per_image_ms: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Fully resolved settings; enough to rerun the command.
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub model_fingerprint: Option<String>,
    pub stats_fingerprint: Option<String>,
    pub outputs: Vec<String>,
    pub timing: Timing,
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Output bookkeeping for one command run.
#[derive(Debug)]
pub struct Run {
    out: PathBuf,
    pub outputs: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub model_fingerprint: Option<String>,
    pub stats_fingerprint: Option<String>,
    pub images_generated: usize,
    pub generation_time: Duration,
}

impl Run {
    pub fn new(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(Self {
            out: out.to_path_buf(),
            outputs: vec![],
            seeds: BTreeMap::new(),
            model_fingerprint: None,
            stats_fingerprint: None,
            images_generated: 0,
            generation_time: Duration::ZERO,
        })
    }

    /// Registers an output file relative to the run directory.
    pub fn output(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        self.outputs.push(name.to_string());
        Ok(path)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let path = self.output(name)?;
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, bytes)
    }

    pub fn timed<T>(&mut self, images: usize, f: impl FnOnce() -> T) -> T {
        let start = std::time::Instant::now();
        let value = f();
        self.generation_time += start.elapsed();
        self.images_generated += images;
        value
    }

    pub fn finish(self, command: &str, config: Value, wall: Duration) -> Result<RunManifest> {
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config,
            seeds: self.seeds,
            model_fingerprint: self.model_fingerprint,
            stats_fingerprint: self.stats_fingerprint,
            outputs: self.outputs,
            timing: Timing {
                wall_ms: wall.as_secs_f64() * 1e3,
                per_image_ms: (self.images_generated > 0)
                    .then(|| self.generation_time.as_secs_f64() * 1e3 / self.images_generated as f64),
            },
        };
        let path = self.out.join(MANIFEST_NAME);
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| usage(format!("manifest {}: {e}", path.display())))
}
