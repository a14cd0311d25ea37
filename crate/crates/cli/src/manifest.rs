use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use irnn::train::TrainConfig;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Everything needed to rerun a training command bit-exactly.
///
/// The `digest` covers the reproducible part only: tool version, command,
/// resolved configuration and input contents. Paths and the start time are
/// recorded but left out so reruns elsewhere share a digest.
#[derive(Clone, Debug)]
pub struct RunManifest {
    pub command: String,
    pub settings: Vec<(String, String)>,
    pub config: TrainConfig,
    pub inputs: Vec<(String, PathBuf, String)>,
    pub started: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: &TrainConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            settings: Vec::new(),
            config: config.clone(),
            inputs: Vec::new(),
            started: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        }
    }

    pub fn setting(&mut self, key: &str, value: impl ToString) {
        self.settings.push((key.to_string(), value.to_string()));
    }

    /// Records an input file under `role` along with its content hash.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
        self.inputs.push((role.to_string(), path.to_path_buf(), sha256_hex(&bytes)));
        Ok(())
    }

    fn reproducible_part(&self) -> String {
        let mut s = format!("tool=irnn {}\ncommand={}\n", env!("CARGO_PKG_VERSION"), self.command);
        for (k, v) in &self.settings {
            let _ = writeln!(s, "{k}={v}");
        }
        for (role, _, hash) in &self.inputs {
            let _ = writeln!(s, "input.{role}.sha256={hash}");
        }
        for line in self.config.to_key_values().lines() {
            let _ = writeln!(s, "config.{line}");
        }
        s
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.reproducible_part().as_bytes())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.reproducible_part();
        for (role, path, _) in &self.inputs {
            let _ = writeln!(s, "path.{role}={}", path.display());
        }
        let _ = writeln!(s, "started_unix={}", self.started);
        let _ = writeln!(s, "digest={}", self.digest());
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).with_context(|| format!("cannot write {}", path.display()))
    }
}

/// Base preset, then the config file (flag or `IRNN_CONFIG`), then `--set`
/// overrides in order, then `--seed`.
pub fn resolve_config(preset: Option<&str>, file: Option<&Path>, sets: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match preset {
        Some(p) => TrainConfig::preset(p)?,
        None => TrainConfig::default(),
    };
    let env_file = std::env::var_os("IRNN_CONFIG").filter(|v| !v.is_empty()).map(PathBuf::from);
    if let Some(path) = file.map(Path::to_path_buf).or(env_file) {
        let text = fs::read_to_string(&path).with_context(|| format!("cannot read config {}", path.display()))?;
        cfg.apply_key_values(&text).with_context(|| format!("in config {}", path.display()))?;
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .with_context(|| format!("--set expects key=value, got {s:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}
