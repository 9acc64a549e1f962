//! Content hashing, run logs and cleanup of partial outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::Result;

/// SHA-256 of a git-style blob header (`blob <len>\0`) followed by the bytes.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    Ok(blob_hash(&std::fs::read(path)?))
}

pub fn text_hash(text: &str) -> String {
    blob_hash(text.as_bytes())
}

/// Everything needed to reproduce one command invocation. Contains no
/// timestamps, so identical runs produce identical logs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub command: String,
    pub seed: Option<u64>,
    pub config: String,
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<(String, String)>,
}

impl RunLog {
    pub fn new(command: &str, seed: Option<u64>, config: String) -> Self {
        Self {
            command: command.to_string(),
            seed,
            config,
            ..Self::default()
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let h = file_hash(path)?;
        self.inputs.push((path.display().to_string(), h));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let h = file_hash(path)?;
        self.outputs.push((path.display().to_string(), h));
        Ok(())
    }

    /// Hash over the config and every input hash.
    pub fn content_hash(&self) -> String {
        let mut s = self.config.clone();
        for (p, h) in &self.inputs {
            let _ = writeln!(s, "{p}\t{h}");
        }
        text_hash(&s)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("command\t{}\n", self.command);
        match self.seed {
            Some(seed) => {
                let _ = writeln!(s, "seed\t{seed}");
            }
            None => s.push_str("seed\tnone\n"),
        }
        for (p, h) in &self.inputs {
            let _ = writeln!(s, "input\t{p}\t{h}");
        }
        for (p, h) in &self.outputs {
            let _ = writeln!(s, "output\t{p}\t{h}");
        }
        let _ = writeln!(s, "content_hash\t{}", self.content_hash());
        s.push_str("[config]\n");
        s.push_str(&self.config);
        s
    }
}

/// Tracks files and directories created by a command and removes them on
/// drop unless [`Outputs::commit`] was called.
#[derive(Debug, Default)]
pub struct Outputs {
    created: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a file that is about to be written.
    pub fn file(&mut self, path: impl Into<PathBuf>) -> PathBuf {
        let p = path.into();
        self.created.push(p.clone());
        p
    }

    /// Creates `path` (and parents); only newly created directories are
    /// removed on failure.
    pub fn dir(&mut self, path: impl AsRef<Path>) -> Result<PathBuf> {
        let path = path.as_ref();
        let mut missing = Vec::new();
        let mut cur = Some(path);
        while let Some(p) = cur {
            if p.as_os_str().is_empty() || p.exists() {
                break;
            }
            missing.push(p.to_path_buf());
            cur = p.parent();
        }
        std::fs::create_dir_all(path)?;
        self.created.extend(missing.into_iter().rev());
        Ok(path.to_path_buf())
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in self.created.iter().rev() {
            if p.is_dir() {
                let _ = std::fs::remove_dir_all(p);
            } else {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_is_git_style() {
        let mut h = Sha256::new();
        h.update(b"blob 3\0abc");
        assert_eq!(blob_hash(b"abc"), hex::encode(h.finalize()));
    }

    #[test]
    fn outputs_removed_unless_committed() {
        let tmp = tempfile::tempdir().unwrap();
        let nested = tmp.path().join("a/b");
        {
            let mut o = Outputs::new();
            let d = o.dir(&nested).unwrap();
            std::fs::write(o.file(d.join("x.txt")), "x").unwrap();
        }
        assert!(!tmp.path().join("a").exists());
        let mut o = Outputs::new();
        let d = o.dir(&nested).unwrap();
        std::fs::write(o.file(d.join("x.txt")), "x").unwrap();
        o.commit();
        assert!(nested.join("x.txt").exists());
    }

    #[test]
    fn run_log_is_deterministic() {
        let mut a = RunLog::new("evaluate", Some(3), "k = 1\n".into());
        a.inputs.push(("in".into(), "h".into()));
        let b = a.clone();
        assert_eq!(a.to_text(), b.to_text());
        assert!(a.to_text().contains("content_hash\t"));
        let mut c = a.clone();
        c.config.push('x');
        assert_ne!(a.content_hash(), c.content_hash());
    }
}
