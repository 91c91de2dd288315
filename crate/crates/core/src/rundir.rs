//! Immutable run directories.
//!
//! A run directory is created fresh (an existing non-empty directory is
//! refused), guarded by a `.lock` file while the command runs, and closed
//! with `run_index.json`, which lists every file with its size and SHA-256.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const LOCK_FILE: &str = ".lock";
pub const INDEX_FILE: &str = "run_index.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunIndex {
    pub command: String,
    pub files: Vec<IndexEntry>,
}

pub struct RunDir {
    path: PathBuf,
    command: String,
    closed: bool,
}

impl RunDir {
    pub fn create(path: &Path, command: &str) -> Result<Self> {
        if path.exists() {
            let mut entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
            if entries.next().is_some() {
                let reason = if path.join(LOCK_FILE).exists() {
                    "is locked by another run"
                } else {
                    "already exists and is not empty; run directories are never reused"
                };
                return Err(Error::RunDir(format!("{} {reason}", path.display())));
            }
        }
        std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        let lock = path.join(LOCK_FILE);
        std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| Error::RunDir(format!("cannot lock {}: {e}", path.display())))?;
        Ok(Self {
            path: path.to_path_buf(),
            command: command.to_string(),
            closed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, rel: &str) -> PathBuf {
        self.path.join(rel)
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.path.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    /// Writes the index and releases the lock.
    pub fn close(mut self) -> Result<RunIndex> {
        std::fs::remove_file(self.path.join(LOCK_FILE)).map_err(|e| Error::io(&self.path, e))?;
        let mut files = Vec::new();
        collect(&self.path, &self.path, &mut files)?;
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let index = RunIndex {
            command: self.command.clone(),
            files,
        };
        let p = self.path.join(INDEX_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&p, e))?;
        self.closed = true;
        Ok(index)
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.closed {
            let _ = std::fs::remove_file(self.path.join(LOCK_FILE));
        }
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<IndexEntry>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() {
            collect(root, &p, out)?;
            continue;
        }
        let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
        if rel == INDEX_FILE || rel == LOCK_FILE {
            continue;
        }
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        out.push(IndexEntry {
            path: rel,
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    Ok(())
}

/// SHA-256 over every file below `dir` (relative paths and contents), in
/// path order.
pub fn directory_checksum(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let mut h = Sha256::new();
    for f in files {
        h.update(f.path.as_bytes());
        h.update(f.sha256.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lifecycle() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("run");
        let run = RunDir::create(&p, "test").unwrap();
        assert!(p.join(LOCK_FILE).exists());
        assert!(matches!(RunDir::create(&p, "other"), Err(Error::RunDir(_))));
        run.write("a/b.txt", b"hello").unwrap();
        let index = run.close().unwrap();
        assert!(!p.join(LOCK_FILE).exists());
        assert_eq!(index.files.len(), 1);
        assert_eq!(index.files[0].path, "a/b.txt");
        assert_eq!(index.files[0].bytes, 5);
        let err = RunDir::create(&p, "again").err().unwrap().to_string();
        assert!(err.contains("never reused"), "{err}");
    }

    #[test]
    fn checksum_tracks_content() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        std::fs::write(a.path().join("x"), b"1").unwrap();
        std::fs::write(b.path().join("x"), b"1").unwrap();
        assert_eq!(directory_checksum(a.path()).unwrap(), directory_checksum(b.path()).unwrap());
        std::fs::write(b.path().join("x"), b"2").unwrap();
        assert_ne!(directory_checksum(a.path()).unwrap(), directory_checksum(b.path()).unwrap());
    }
}
