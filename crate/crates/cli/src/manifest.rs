//! Run manifests: everything needed to repeat a run and check its outputs.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use ceres_core::config::RunConfig;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> io::Result<Self> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_hex(&fs::read(path)?),
        })
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Versions {
    pub ceres: &'static str,
    pub manifest: u32,
    pub checkpoint: &'static str,
    pub sessions: &'static str,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    /// Fully resolved configuration, one `key = value` per entry.
    pub config: Vec<String>,
    /// Command arguments that are not part of the configuration.
    pub args: Vec<(String, String)>,
    pub versions: Versions,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.to_string(),
            seed: cfg.seed.expect("seed is resolved before a run"),
            config_hash: cfg.hash(),
            config: cfg.to_text().lines().map(str::to_string).collect(),
            args: Vec::new(),
            versions: Versions {
                ceres: env!("CARGO_PKG_VERSION"),
                manifest: MANIFEST_VERSION,
                checkpoint: ceres_core::nn::CKPT_HEADER,
                sessions: ceres_core::session::SESSIONS_HEADER,
            },
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn arg(mut self, key: &str, value: impl ToString) -> Self {
        self.args.push((key.to_string(), value.to_string()));
        self
    }

    pub fn input(&mut self, path: &Path) -> io::Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> io::Result<()> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(path, text + "\n")
    }
}

/// `<file>.manifest.json` next to a single output file.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(suffix);
    PathBuf::from(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_bytes() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(sidecar(Path::new("out/data.jsonl"), ".manifest.json"), PathBuf::from("out/data.jsonl.manifest.json"));
    }

    #[test]
    fn manifest_records_resolved_seed_and_config() {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(9);
        cfg.pretrain.peak_lr = 0.002;
        let m = Manifest::new("pretrain", &cfg);
        assert_eq!(m.seed, 9);
        assert!(m.config.iter().any(|l| l == "pretrain.peak_lr = 0.002"));
        assert_eq!(m.config_hash, cfg.hash());
    }
}
