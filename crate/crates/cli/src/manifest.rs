//! Per-invocation run manifest with artifact checksums.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: PathBuf,
    pub seed: u64,
    pub duration_secs: f64,
    /// Output-relative path to lowercase hex SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.strip_prefix(root).ok() != Some(Path::new(RUN_MANIFEST_FILE)) {
            out.push(path);
        }
    }
    Ok(())
}

/// Checksums every file below `dir`, except the manifest itself.
pub fn checksum_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files
        .into_iter()
        .map(|p| {
            let rel = p
                .strip_prefix(dir)
                .expect("walked below dir")
                .to_string_lossy()
                .replace('\\', "/");
            Ok((rel, sha256_file(&p)?))
        })
        .collect()
}

/// Starts timing when created; [`RunRecorder::finish`] writes the manifest.
pub struct RunRecorder {
    command: String,
    config: BTreeMap<String, String>,
    inputs: Vec<PathBuf>,
    seed: u64,
    started: Instant,
}

impl RunRecorder {
    pub fn start(
        command: &str,
        config: BTreeMap<String, String>,
        inputs: Vec<PathBuf>,
        seed: u64,
    ) -> Self {
        Self {
            command: command.to_string(),
            config,
            inputs,
            seed,
            started: Instant::now(),
        }
    }

    pub fn finish(self, outputs: &Path) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            inputs: self.inputs,
            outputs: outputs.to_path_buf(),
            seed: self.seed,
            duration_secs: self.started.elapsed().as_secs_f64(),
            artifacts: checksum_tree(outputs)?,
        };
        let path = outputs.join(RUN_MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(RUN_MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}
