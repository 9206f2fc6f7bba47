//! Run manifests: the resolved configuration plus content hashes of every
//! input and output file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unlearn_core::config::LabConfig;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config: LabConfig,
    pub seed: Option<u64>,
    /// Files read by the command, keyed by path relative to the output directory.
    pub inputs: BTreeMap<String, String>,
    /// Files written by the command.
    pub artifacts: BTreeMap<String, String>,
    pub tool_version: String,
    /// Seconds since the Unix epoch; the only field that differs between re-runs.
    pub timestamp: u64,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes of `paths`, keyed by their path relative to `root`.
pub fn hash_files(root: &Path, paths: &[&Path]) -> Result<BTreeMap<String, String>, CliError> {
    paths
        .iter()
        .map(|p| {
            let key = p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/");
            Ok((key, sha256_file(p)?))
        })
        .collect()
}

pub fn manifest_path(out_dir: &Path, command: &str) -> std::path::PathBuf {
    out_dir.join(format!("{command}.manifest.json"))
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("manifest {}: {e}", path.display())))
    }

    pub fn write(&self, out_dir: &Path) -> Result<std::path::PathBuf, CliError> {
        let path = manifest_path(out_dir, &self.command);
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Input(e.to_string()))?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}
