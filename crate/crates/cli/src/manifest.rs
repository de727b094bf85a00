//! Run manifests: what a command was asked to do and what it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use afan_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;
/// File name of the manifest inside directory outputs.
pub const DIR_MANIFEST: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathDigest {
    pub path: PathBuf,
    /// sha256 per file, keyed by the path relative to `path` (a file output
    /// has a single entry under its own name).
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub command: String,
    /// The fully resolved arguments; enough to run the command again.
    pub args: serde_json::Value,
    pub config_hash: String,
    pub seed: Option<u64>,
    pub inputs: Vec<PathDigest>,
    pub outputs: Vec<PathDigest>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub versions: BTreeMap<String, String>,
}

impl RunManifest {
    /// The manifest with its timestamps zeroed, for comparisons.
    pub fn without_timestamps(&self) -> Self {
        Self { started_unix_ms: 0, finished_unix_ms: 0, ..self.clone() }
    }
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("afan".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint_format".to_string(), afan_core::checkpoint::FORMAT_VERSION.to_string()),
        ("dataset_manifest".to_string(), afan_core::synthdata::MANIFEST_VERSION.to_string()),
        ("run_manifest".to_string(), MANIFEST_VERSION.to_string()),
    ])
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn is_manifest(name: &str) -> bool {
    name == DIR_MANIFEST || name.ends_with(".manifest.json")
}

/// Digests of every regular file under `path`, manifests and temporaries
/// excluded.
pub fn digest_path(path: &Path) -> Result<PathDigest> {
    let mut files = BTreeMap::new();
    if path.is_file() {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        files.insert(name, sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?));
    } else if path.is_dir() {
        for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::io(path, e.into()))?;
            if !entry.file_type().is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy();
            if is_manifest(&name) || name.ends_with(".tmp") {
                continue;
            }
            let rel = entry.path().strip_prefix(path).expect("walk stays under its root");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            files.insert(key, sha256_hex(&fs::read(entry.path()).map_err(|e| Error::io(entry.path(), e))?));
        }
    } else {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")));
    }
    Ok(PathDigest { path: path.to_path_buf(), files })
}

/// Where the manifest of an output goes: inside a directory output, or
/// beside a file output as `<stem>.manifest.json`.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join(DIR_MANIFEST)
    } else {
        let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "output".into());
        out.with_file_name(format!("{stem}.manifest.json"))
    }
}

pub fn write(path: &Path, manifest: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)? + "\n";
    afan_core::checkpoint::write_atomic(path, text.as_bytes())
}

pub fn read(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::format(None, format!("bad run manifest {}: {e}", path.display())))?;
    if m.manifest_version != MANIFEST_VERSION {
        return Err(Error::Version(format!("run manifest version {} (expected {MANIFEST_VERSION})", m.manifest_version)));
    }
    Ok(m)
}
