//! Run manifests: what was run, on which inputs, producing which files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// RFC 3339, UTC. Taken from `SOURCE_DATE_EPOCH` when set.
    pub timestamp: String,
    pub seed: u64,
    pub parameters: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> CliResult<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
    })
}

pub fn timestamp() -> String {
    let epoch = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok());
    let t = match epoch.and_then(|s| chrono::DateTime::from_timestamp(s, 0)) {
        Some(t) => t,
        None => chrono::Utc::now(),
    };
    t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// One file to be written into the output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Output {
    pub name: String,
    pub bytes: Vec<u8>,
}

impl Output {
    pub fn text(name: &str, text: String) -> Self {
        Self {
            name: name.to_string(),
            bytes: text.into_bytes(),
        }
    }

    pub fn json<T: Serialize>(name: &str, value: &T) -> Self {
        let mut s = serde_json::to_string_pretty(value).expect("serializable output");
        s.push('\n');
        Self::text(name, s)
    }
}

/// Clears files recorded by an earlier manifest; anything else in the
/// directory is left alone and makes the run fail.
fn prepare_dir(dir: &Path) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    let manifest = dir.join(MANIFEST_NAME);
    if manifest.exists() {
        let old: RunManifest = serde_json::from_slice(&std::fs::read(&manifest).map_err(io)?)
            .map_err(|e| CliError::usage(format!("{}: unreadable manifest: {e}", manifest.display())))?;
        for f in &old.outputs {
            let p = dir.join(&f.path);
            if p.exists() {
                std::fs::remove_file(&p).map_err(io)?;
            }
        }
        std::fs::remove_file(&manifest).map_err(io)?;
    }
    let leftover: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    if !leftover.is_empty() {
        return Err(CliError::usage(format!(
            "output directory {} contains files not written by a previous run",
            dir.display()
        )));
    }
    Ok(())
}

/// Writes outputs and the manifest referencing them.
pub fn write_run(dir: &Path, outputs: &[Output], mut manifest: RunManifest) -> CliResult<RunManifest> {
    prepare_dir(dir)?;
    let mut names: Vec<&str> = outputs.iter().map(|o| o.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) || names.contains(&MANIFEST_NAME) {
        return Err(CliError::Io("duplicate output name".into()));
    }
    manifest.outputs.clear();
    for o in outputs {
        let p = dir.join(&o.name);
        std::fs::write(&p, &o.bytes).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        manifest.outputs.push(FileDigest {
            path: o.name.clone(),
            sha256: sha256_hex(&o.bytes),
            bytes: o.bytes.len() as u64,
        });
    }
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let p = dir.join(MANIFEST_NAME);
    std::fs::write(&p, text).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    Ok(manifest)
}
