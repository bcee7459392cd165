//! Run directories and their manifests.

use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use dgf_core::pipeline::ExperimentConfig;
use dgf_core::{Error, Result};
use serde::Serialize;

pub const OUTPUT_ROOT_VAR: &str = "DGF_OUTPUT_ROOT";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub kind: String,
    pub path: PathBuf,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    /// Every setting the run used, defaults included.
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub output_dir: PathBuf,
    pub started: String,
    pub finished: Option<String>,
    pub status: String,
    pub error: Option<String>,
    pub artifacts: Vec<Artifact>,
}

pub struct RunDir {
    pub path: PathBuf,
    manifest: RunManifest,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn default_dir(command: &str) -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
        .join(command)
}

impl RunDir {
    /// Creates the directory. A directory holding a previous run is only
    /// reused when `overwrite` is set, and is then emptied.
    pub fn create(
        path: PathBuf,
        overwrite: bool,
        command: &str,
        config_path: Option<PathBuf>,
        config: &ExperimentConfig,
    ) -> Result<Self> {
        if path.exists() {
            let occupied = std::fs::read_dir(&path)?.next().is_some();
            if occupied && !overwrite {
                return Err(Error::config(
                    "out",
                    format!("{} already exists; pass --overwrite to replace it", path.display()),
                ));
            }
            if occupied {
                std::fs::remove_dir_all(&path)?;
            }
        }
        std::fs::create_dir_all(&path)?;
        Ok(Self {
            manifest: RunManifest {
                command: command.to_string(),
                args: std::env::args().collect(),
                config_path,
                config: config.clone(),
                config_hash: config.hash(),
                output_dir: path.clone(),
                started: now(),
                finished: None,
                status: "running".into(),
                error: None,
                artifacts: Vec::new(),
            },
            path,
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes `contents` to `name` inside the run directory and records it.
    pub fn write(&mut self, kind: &str, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(name);
        std::fs::write(&p, contents)?;
        self.record(kind, &p);
        Ok(p)
    }

    pub fn record(&mut self, kind: &str, path: &Path) {
        self.manifest.artifacts.push(Artifact {
            kind: kind.to_string(),
            path: path.to_path_buf(),
        });
    }

    pub fn finish(mut self, outcome: &Result<()>) -> Result<()> {
        self.manifest.finished = Some(now());
        match outcome {
            Ok(()) => self.manifest.status = "ok".into(),
            Err(e) => {
                self.manifest.status = "failed".into();
                self.manifest.error = Some(e.to_string());
            }
        }
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.file(MANIFEST), text)?;
        Ok(())
    }
}
