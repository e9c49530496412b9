//! Output directory bookkeeping and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use shortcut_audit::corpus::sha256_hex;

use crate::Failure;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

/// Collects the files a command writes under `<out>/<command>/` together
/// with the inputs and configuration that produced them.
pub struct Bundle {
    command: String,
    dir: PathBuf,
    config: Value,
    inputs: Vec<FileHash>,
    outputs: BTreeMap<String, String>,
}

impl Bundle {
    pub fn create(out: &Path, command: &str, config: Value) -> Result<Self, Failure> {
        let dir = out.join(command);
        fs::create_dir_all(&dir).map_err(|e| Failure::data(format!("{}: {e}", dir.display())))?;
        Ok(Bundle {
            command: command.to_string(),
            dir,
            config,
            inputs: Vec::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Records an input file by content hash.
    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        let bytes = fs::read(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Failure::data(format!("{}: {e}", parent.display())))?;
        }
        fs::write(&path, bytes).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        self.outputs.insert(rel.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), Failure> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| Failure::internal(format!("serializing {rel}: {e}")))?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Registers a file some library routine already wrote under the bundle.
    pub fn adopt(&mut self, rel: &str) -> Result<(), Failure> {
        let path = self.dir.join(rel);
        let bytes = fs::read(&path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        self.outputs.insert(rel.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    /// Hash over command, configuration and input contents.
    pub fn run_hash(&self) -> String {
        let key = json!({
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs.iter().map(|f| &f.sha256).collect::<Vec<_>>(),
        });
        sha256_hex(key.to_string().as_bytes())
    }

    /// Writes `run_manifest.json` and returns the run hash.
    pub fn finish(self) -> Result<String, Failure> {
        let run_hash = self.run_hash();
        let outputs: Vec<FileHash> = self
            .outputs
            .iter()
            .map(|(path, sha256)| FileHash {
                path: path.clone(),
                sha256: sha256.clone(),
            })
            .collect();
        let manifest = json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "run_hash": run_hash,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": outputs,
        });
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        let path = self.dir.join(RUN_MANIFEST);
        fs::write(&path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        Ok(run_hash)
    }
}
