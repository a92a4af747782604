//! Run manifests: what was run, with which resolved settings, on which
//! inputs, producing which outputs.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Data outputs must reproduce bit-exactly; logs may carry timings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Data,
    Log,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HashedPath {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: PathBuf,
    pub sha256: String,
    pub kind: OutputKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub code_version: String,
    pub rng: String,
    pub inputs: Vec<HashedPath>,
    pub outputs: Vec<OutputEntry>,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn data_outputs(&self) -> impl Iterator<Item = &OutputEntry> {
        self.outputs.iter().filter(|o| o.kind == OutputKind::Data)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut f = fs::File::open(path)?;
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Regular files under `root`, sorted, relative to `root`. Skips `skip`.
pub fn tree_files(root: &Path, skip: &[&str]) -> Result<Vec<PathBuf>> {
    fn walk(base: &Path, dir: &Path, skip: &[&str], out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            let rel = path.strip_prefix(base).expect("walk stays under base").to_path_buf();
            if skip.iter().any(|s| rel == Path::new(s)) {
                continue;
            }
            if entry.file_type()?.is_dir() {
                walk(base, &path, skip, out)?;
            } else {
                out.push(rel);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, skip, &mut out)?;
    out.sort();
    Ok(out)
}

/// Hash of a file, or of a directory as the sorted list of
/// `relative-path NUL file-hash` lines. The manifest file is left out.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_file() {
        return hash_file(path);
    }
    let mut h = Sha256::new();
    for rel in tree_files(path, &[MANIFEST_FILE])? {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(hash_file(&path.join(&rel))?.as_bytes());
        h.update([b'\n']);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn hashed(path: &Path) -> Result<HashedPath> {
    Ok(HashedPath {
        path: path.to_path_buf(),
        sha256: hash_path(path)?,
    })
}

pub fn output(path: &Path, kind: OutputKind) -> Result<OutputEntry> {
    Ok(OutputEntry {
        path: path.to_path_buf(),
        sha256: hash_file(path)?,
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn tree_hash_ignores_manifest_and_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a")).unwrap();
        fs::write(dir.path().join("a/x.bin"), b"1").unwrap();
        let h1 = hash_path(dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), b"{}").unwrap();
        assert_eq!(hash_path(dir.path()).unwrap(), h1);
        fs::write(dir.path().join("a/x.bin"), b"2").unwrap();
        assert_ne!(hash_path(dir.path()).unwrap(), h1);
    }
}
