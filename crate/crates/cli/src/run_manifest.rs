//! `<output>.run.json` sidecars describing how an artifact was produced.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use qntz_core::Result;

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// No timestamps, so identical runs give identical sidecars.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: Value,
    pub inputs: Vec<InputDigest>,
    pub command_line: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl RunManifest {
    pub fn new(command: &str, config: Value, inputs: &[&Path]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok(InputDigest { path: p.display().to_string(), sha256: sha256_file(p)? }))
            .collect::<Result<_>>()?;
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            config,
            inputs,
            command_line: std::env::args().collect(),
        })
    }

    pub fn sidecar_path(output: &Path) -> PathBuf {
        let mut s = output.as_os_str().to_owned();
        s.push(".run.json");
        PathBuf::from(s)
    }

    /// Write next to `output`.
    pub fn write_for(&self, output: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(Self::sidecar_path(output), text + "\n")?;
        Ok(())
    }
}
