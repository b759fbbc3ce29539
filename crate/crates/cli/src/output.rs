//! Output files of one command; everything written is removed unless the
//! command commits.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub struct OutputGuard {
    dir: PathBuf,
    written: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            committed: false,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Registers a file or directory for removal on failure.
    pub fn track(&mut self, name: &str) -> PathBuf {
        let p = self.path(name);
        self.written.push(p.clone());
        p
    }

    pub fn write(&mut self, name: &str, body: &str) -> Result<PathBuf> {
        let p = self.track(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut body = serde_json::to_string_pretty(value)?;
        body.push('\n');
        self.write(name, &body)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf> {
        self.write(name, &kgpath_core::corpus::to_jsonl(rows))
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in self.written.iter().rev() {
            let r = if p.is_dir() {
                fs::remove_dir_all(p)
            } else {
                fs::remove_file(p)
            };
            if let Err(e) = r {
                if e.kind() != std::io::ErrorKind::NotFound {
                    log::warn!("could not remove partial output {}: {e}", p.display());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_are_removed() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut g = OutputGuard::new(dir.path()).unwrap();
            g.write("a.txt", "x").unwrap();
            let d = g.track("ckpt");
            fs::create_dir_all(d.join("inner")).unwrap();
        }
        assert!(!dir.path().join("a.txt").exists());
        assert!(!dir.path().join("ckpt").exists());
        let mut g = OutputGuard::new(dir.path()).unwrap();
        g.write("b.txt", "y").unwrap();
        g.commit();
        assert!(dir.path().join("b.txt").exists());
    }
}
