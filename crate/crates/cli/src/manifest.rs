//! Run manifests: each command that writes artifacts records what it wrote,
//! with content hashes, so a run can be checked for byte-identical
//! reproduction. Wall-clock latency values never enter a manifest.

use std::fs;
use std::path::Path;

use condenser_forge_core::error::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct ArtifactHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub master_seed: u64,
    /// Requested worker-thread cap; the executor itself is serial.
    pub threads: usize,
    pub config: serde_json::Value,
    pub inputs: Vec<ArtifactHash>,
    pub outputs: Vec<ArtifactHash>,
}

impl RunManifest {
    pub fn new(command: &str, master_seed: u64, threads: usize, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            master_seed,
            threads,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn push_input_file(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(hash_file(path)?);
        Ok(())
    }

    /// One rolled-up digest over every file in `dir`, sorted by name.
    pub fn push_input_dir(&mut self, dir: &Path) -> Result<()> {
        self.inputs.push(ArtifactHash {
            path: dir.display().to_string(),
            sha256: dir_sha256(dir)?,
        });
        Ok(())
    }

    pub fn push_output_file(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(hash_file(path)?);
        Ok(())
    }

    /// Every file in `dir` as its own entry.
    pub fn push_output_dir_files(&mut self, dir: &Path) -> Result<()> {
        for name in sorted_file_names(dir)? {
            self.outputs.push(hash_file(&dir.join(name))?);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json)?;
        Ok(())
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read `{}`: {e}", path.display())))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Digest over (name, bytes) of every regular file in `dir`, sorted by name.
pub fn dir_sha256(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in sorted_file_names(dir)? {
        h.update(name.as_bytes());
        h.update([0u8]);
        let bytes = fs::read(dir.join(&name))
            .map_err(|e| Error::Format(format!("cannot read `{}`: {e}", dir.join(&name).display())))?;
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

fn hash_file(path: &Path) -> Result<ArtifactHash> {
    Ok(ArtifactHash { path: path.display().to_string(), sha256: file_sha256(path)? })
}

fn sorted_file_names(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::Format(format!("cannot read directory `{}`: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
