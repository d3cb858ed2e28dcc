use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Versions {
    pub ldtail: String,
    pub ldtail_cli: String,
}

/// Written as manifest.json next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    /// sha256 of the resolved config in TOML form
    pub config_hash: String,
    pub seed: u64,
    pub workers: usize,
    pub versions: Versions,
    pub started_unix: u64,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
    pub status: String,
    pub notes: Vec<String>,
    pub rerun: String,
}

pub fn config_hash(cfg: &RunConfig) -> String {
    format!("{:x}", Sha256::digest(cfg.to_toml().as_bytes()))
}

/// Output directory plus bookkeeping for the manifest.
pub struct RunContext {
    pub command: String,
    pub args: Vec<String>,
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
    started: Instant,
    started_unix: u64,
}

impl RunContext {
    pub fn new(command: &str, args: Vec<String>, cfg: RunConfig, out: PathBuf, seed: u64, workers: usize) -> Result<Self, CliError> {
        std::fs::create_dir_all(&out).map_err(|e| CliError::Config(format!("cannot create {}: {e}", out.display())))?;
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Ok(Self {
            command: command.into(),
            args,
            cfg,
            out,
            seed,
            workers,
            outputs: Vec::new(),
            notes: Vec::new(),
            started: Instant::now(),
            started_unix,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| CliError::Config(format!("cannot write {}: {e}", p.display())))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    pub fn note(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        log::warn!("{msg}");
        self.notes.push(msg);
    }

    /// Writes config.toml and manifest.json.
    pub fn finish(&mut self, status: &str) -> Result<Manifest, CliError> {
        let toml_text = self.cfg.to_toml();
        self.write("config.toml", &toml_text)?;
        let config_path = self.path("config.toml");
        let manifest = Manifest {
            command: self.command.clone(),
            args: self.args.clone(),
            config: self.cfg.clone(),
            config_hash: config_hash(&self.cfg),
            seed: self.seed,
            workers: self.workers,
            versions: Versions {
                ldtail: ldtail_version().into(),
                ldtail_cli: env!("CARGO_PKG_VERSION").into(),
            },
            started_unix: self.started_unix,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs.clone(),
            status: status.into(),
            notes: self.notes.clone(),
            rerun: format!(
                "ldtail {} --config {} --out {} --seed {} --workers {}{}",
                self.command,
                shown(&config_path),
                shown(&self.out),
                self.seed,
                self.workers,
                self.args.iter().map(|a| format!(" {a}")).collect::<String>()
            ),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        let p = self.path("manifest.json");
        std::fs::write(&p, json + "\n").map_err(|e| CliError::Config(format!("cannot write {}: {e}", p.display())))?;
        Ok(manifest)
    }
}

fn shown(p: &Path) -> String {
    p.display().to_string()
}

fn ldtail_version() -> &'static str {
    // the core crate is a path dependency released in lockstep
    env!("CARGO_PKG_VERSION")
}
