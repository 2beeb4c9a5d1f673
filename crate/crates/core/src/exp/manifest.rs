//! Run manifests: every output file with its SHA-256.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunInfo {
    pub name: String,
    pub experiment: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub code_version: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub run: RunInfo,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(&p, root, out)?;
        } else if p.strip_prefix(root).map(|r| r != Path::new(MANIFEST_NAME)).unwrap_or(true) {
            out.push(p);
        }
    }
    Ok(())
}

fn relative(root: &Path, p: &Path) -> String {
    let rel = p.strip_prefix(root).unwrap_or(p);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Hashes every file under `dir` except the manifest itself.
pub fn build_manifest(dir: &Path, run: RunInfo) -> Result<Manifest> {
    let mut paths = Vec::new();
    collect(dir, dir, &mut paths)?;
    let mut files = Vec::with_capacity(paths.len());
    for p in paths {
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        files.push(FileEntry { path: relative(dir, &p), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest { run, files })
}

pub fn write_manifest(dir: &Path, run: RunInfo) -> Result<Manifest> {
    let m = build_manifest(dir, run)?;
    let text = toml::to_string(&m).map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ManifestProblem {
    Missing(String),
    Changed(String),
    Unlisted(String),
}

/// Re-hashes the run directory against its manifest.
pub fn verify_manifest(dir: &Path) -> Result<Vec<ManifestProblem>> {
    let m = read_manifest(dir)?;
    let now = build_manifest(dir, m.run.clone())?;
    let mut problems = Vec::new();
    for f in &m.files {
        match now.files.iter().find(|g| g.path == f.path) {
            None => problems.push(ManifestProblem::Missing(f.path.clone())),
            Some(g) if g.sha256 != f.sha256 => problems.push(ManifestProblem::Changed(f.path.clone())),
            _ => {}
        }
    }
    for g in &now.files {
        if !m.files.iter().any(|f| f.path == g.path) {
            problems.push(ManifestProblem::Unlisted(g.path.clone()));
        }
    }
    Ok(problems)
}
