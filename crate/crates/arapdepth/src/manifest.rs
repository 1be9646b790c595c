//! Run manifests: command, configuration, seed and SHA-256 checksums of
//! every input and output file. Manifests carry no timestamps so repeated
//! runs produce identical bytes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{KeyValue, RunConfig};
use crate::error::{AppError, AppResult};

pub fn sha256_file(path: &Path) -> AppResult<String> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Default)]
pub struct Manifest {
    pub command: String,
    pub inputs: Vec<(String, PathBuf)>,
    pub outputs: Vec<(String, PathBuf)>,
    pub extra: BTreeMap<String, Value>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        Self { command: command.into(), ..Default::default() }
    }

    pub fn input(&mut self, role: &str, path: &Path) -> &mut Self {
        self.inputs.push((role.into(), path.to_path_buf()));
        self
    }

    pub fn output(&mut self, role: &str, path: &Path) -> &mut Self {
        self.outputs.push((role.into(), path.to_path_buf()));
        self
    }

    pub fn note(&mut self, key: &str, value: Value) -> &mut Self {
        self.extra.insert(key.into(), value);
        self
    }

    /// Inputs are recorded by the path given; outputs by file name only, so
    /// the manifest does not depend on the output directory.
    fn files(list: &[(String, PathBuf)], name_only: bool) -> AppResult<Value> {
        list.iter()
            .map(|(role, p)| {
                let shown = match (name_only, p.file_name()) {
                    (true, Some(n)) => n.to_string_lossy().into_owned(),
                    _ => p.display().to_string(),
                };
                Ok(json!({ "role": role, "path": shown, "sha256": sha256_file(p)? }))
            })
            .collect::<AppResult<Vec<_>>>()
            .map(Value::Array)
    }

    pub fn to_json(&self, cfg: &RunConfig) -> AppResult<Value> {
        let config: serde_json::Map<String, Value> =
            RunConfig::KEYS.iter().map(|k| (k.to_string(), Value::String(cfg.get(k).expect("listed key")))).collect();
        Ok(json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "seed": cfg.seed,
            "config": config,
            "inputs": Self::files(&self.inputs, false)?,
            "outputs": Self::files(&self.outputs, true)?,
            "details": self.extra,
        }))
    }

    pub fn write(&self, path: &Path, cfg: &RunConfig) -> AppResult<()> {
        let mut text = serde_json::to_string_pretty(&self.to_json(cfg)?).expect("json values serialize");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| AppError::io(path, e))
    }
}
