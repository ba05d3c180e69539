use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use gatenorm_core::checkpoint::FileSource;
use gatenorm_core::scoring::fingerprint_source;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

pub const MANIFEST_SCHEMA: &str = "manifest/1";

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

/// Sidecar written next to every primary output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub schema: &'static str,
    pub command: String,
    pub params: Value,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    pub version: &'static str,
    pub timestamp_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, params: Value) -> Self {
        Self {
            schema: MANIFEST_SCHEMA,
            command: command.into(),
            params,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION"),
            timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<String, CliError> {
        let source = FileSource::open(path).map_err(|e| CliError::io(path, e))?;
        let sha256 = fingerprint_source(&source)?;
        self.inputs.push(InputHash { path: path.display().to_string(), sha256: sha256.clone() });
        Ok(sha256)
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes `<primary>.manifest.json`.
    pub fn write_beside(&self, primary: &Path) -> Result<PathBuf, CliError> {
        let path = sidecar(primary, "manifest.json");
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// `dir/name.ext` becomes `dir/name.ext.<suffix>`.
pub fn sidecar(primary: &Path, suffix: &str) -> PathBuf {
    let mut name = primary.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    primary.with_file_name(name)
}
