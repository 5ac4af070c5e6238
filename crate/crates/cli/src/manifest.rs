//! Per-run `manifest.json`: config hash, seed, versions, inputs, outputs.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{write, Failure};

#[derive(Debug, Serialize)]
pub struct Manifest {
    command: String,
    config_sha256: String,
    seed: u64,
    versions: Versions,
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
    config: String,
}

#[derive(Debug, Serialize)]
struct Versions {
    pquant: &'static str,
    checkpoint_format: u32,
    packed_format: u32,
}

impl Manifest {
    pub fn new(command: &str, config: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_sha256: hex::encode(Sha256::digest(config.as_bytes())),
            seed,
            versions: Versions {
                pquant: env!("CARGO_PKG_VERSION"),
                checkpoint_format: pquant::training::checkpoint::CHECKPOINT_VERSION,
                packed_format: pquant::inference::packed::PACKED_VERSION,
            },
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: config.into(),
        }
    }

    pub fn input(mut self, name: &str, value: &str) -> Self {
        self.inputs.push((name.into(), value.into()));
        self
    }

    pub fn outputs(mut self, names: &[&str]) -> Self {
        self.outputs.extend(names.iter().map(|s| s.to_string()));
        self
    }

    pub fn write(self, dir: &Path) -> Result<(), Failure> {
        let json = serde_json::to_string_pretty(&self).expect("manifest is always serializable");
        write(&dir.join("manifest.json"), json + "\n")
    }
}
