use std::path::{Path, PathBuf};

use dymesh_core::eval::content_hash;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{io_err, CliResult};

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// A file consumed or produced by a command, with its git-style blob id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub hash: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        Ok(Self {
            path: path.display().to_string(),
            hash: content_hash(&bytes),
        })
    }
}

/// Everything needed to re-run a command: its name and arguments, the full
/// configuration, the seed, and digests of what went in and came out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub args: serde_json::Value,
    pub config: RunConfig,
    pub seed: u64,
    pub threads: Option<usize>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub status: String,
    /// Command-specific results (counts, final losses, ablation flags).
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn new(
        command: &str,
        args: serde_json::Value,
        config: &RunConfig,
        seed: u64,
        threads: Option<usize>,
    ) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            args,
            config: config.clone(),
            seed,
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
            status: "ok".into(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> CliResult<()> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    /// Writes `run_manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(RUN_MANIFEST);
        let mut text = serde_json::to_string_pretty(self).map_err(dymesh_core::Error::from)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Ok(serde_json::from_str(&text).map_err(dymesh_core::Error::from)?)
    }
}
