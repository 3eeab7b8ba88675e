use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use liverseg::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation, written once the run has finished.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    /// Hex SHA-256 of every output file, keyed by path.
    pub checksums: BTreeMap<String, String>,
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(command: &str, started: f64) -> Self {
        Self {
            command: command.to_string(),
            config_path: None,
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            started,
            finished: started,
            checksums: BTreeMap::new(),
        }
    }

    /// Checksums the outputs, stamps the end time and writes `path` via a
    /// temporary file and rename.
    pub fn finish(mut self, path: &Path) -> Result<()> {
        for out in &self.outputs {
            if out.is_file() {
                self.checksums
                    .insert(out.display().to_string(), sha256_file(out)?);
            }
        }
        self.finished = now();
        let tmp = path.with_extension("json.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec_pretty(&self)?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }
}
