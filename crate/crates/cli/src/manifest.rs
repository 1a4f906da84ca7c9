//! Output directories and their run manifests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

/// Version of this build, `v<semver>-g<commit>` when built from a checkout.
pub const VERSION: &str = env!("FLORA_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<FileRecord> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Ok(FileRecord {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Self-description of one command invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn read(dir: &Path) -> Result<RunManifest> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
    }
}

/// An output directory being filled by one command.
pub struct OutDir {
    path: PathBuf,
    started: Instant,
    outputs: Vec<FileRecord>,
    stale: Vec<String>,
}

impl OutDir {
    /// Creates `path`, refusing a non-empty directory unless `force` is set.
    pub fn prepare(path: &Path, force: bool) -> Result<OutDir> {
        let non_empty = path.is_dir()
            && std::fs::read_dir(path)
                .map_err(|e| CliError::io(path, e))?
                .next()
                .is_some();
        if path.exists() && !path.is_dir() {
            return Err(CliError::usage(format!("{} exists and is not a directory", path.display())));
        }
        if non_empty && !force {
            return Err(CliError::usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                path.display()
            )));
        }
        std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        let stale = RunManifest::read(path)
            .map(|m| m.outputs.into_iter().map(|f| f.path).collect())
            .unwrap_or_default();
        Ok(OutDir {
            path: path.to_path_buf(),
            started: Instant::now(),
            outputs: Vec::new(),
            stale,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes `bytes` to `name` atomically and records its hash.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.file(name);
        flora::checkpoint::write_atomic(&path, bytes)?;
        self.outputs.push(FileRecord {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    /// Writes the manifest and removes outputs of an earlier run that this
    /// run did not produce again.
    pub fn finish(
        self,
        command: &str,
        seed: u64,
        mode: Option<String>,
        config: serde_json::Value,
        inputs: Vec<FileRecord>,
    ) -> Result<RunManifest> {
        for old in &self.stale {
            let plain = Path::new(old).file_name().is_some_and(|n| n == old.as_str());
            if plain && !self.outputs.iter().any(|f| &f.path == old) {
                let p = self.path.join(old);
                if p.is_file() {
                    std::fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
                }
            }
        }
        let manifest = RunManifest {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed,
            mode,
            config,
            inputs,
            outputs: self.outputs,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        json.push('\n');
        flora::checkpoint::write_atomic(&self.path.join(MANIFEST), json.as_bytes())?;
        Ok(manifest)
    }
}
