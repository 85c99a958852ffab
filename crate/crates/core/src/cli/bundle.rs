//! Output directories with a checksummed `manifest.json`.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<FileEntry>,
    pub files: Vec<FileEntry>,
}

pub fn sha256_file(path: &Path) -> Result<(u64, String), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    let hex = digest.iter().map(|b| format!("{b:02x}")).collect();
    Ok((bytes.len() as u64, hex))
}

/// An output directory that did not exist before this run.
pub struct Bundle {
    pub dir: PathBuf,
    manifest: Manifest,
}

impl Bundle {
    pub fn create(dir: &Path, command: &str, seed: u64, config: serde_json::Value) -> Result<Self, CliError> {
        if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Data(format!("creating {}: {e}", parent.display())))?;
        }
        std::fs::create_dir(dir).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                CliError::Data(format!("output directory {} already exists", dir.display()))
            } else {
                CliError::Data(format!("creating {}: {e}", dir.display()))
            }
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                tool: env!("CARGO_PKG_NAME"),
                version: env!("CARGO_PKG_VERSION"),
                command: command.to_string(),
                argv: std::env::args().skip(1).collect(),
                seed,
                config,
                inputs: Vec::new(),
                files: Vec::new(),
            },
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        let (bytes, sha256) = sha256_file(path)?;
        self.manifest.inputs.push(FileEntry { path: path.display().to_string(), bytes, sha256 });
        Ok(())
    }

    /// Records a file already written under the bundle directory.
    pub fn record(&mut self, name: &str) -> Result<(), CliError> {
        let (bytes, sha256) = sha256_file(&self.path(name))?;
        self.manifest.files.push(FileEntry { path: name.to_string(), bytes, sha256 });
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf, CliError> {
        self.manifest.files.sort_by(|a, b| a.path.cmp(&b.path));
        let path = self.path("manifest.json");
        crate::interp::report::write_json(&path, &self.manifest)?;
        Ok(self.dir)
    }
}
