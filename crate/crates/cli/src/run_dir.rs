//! Output directories: a lock file while a command writes, and the resolved
//! config alongside the outputs.

use std::fs::{self, OpenOptions};
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::config::RunConfig;
use crate::UsageError;

pub const LOCK_FILE: &str = ".vpe.lock";
pub const RESOLVED_CONFIG: &str = "config.resolved.txt";

/// Exclusive hold on an output directory, released on drop.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl RunDir {
    /// Creates `path` if needed, takes the lock and writes the config.
    pub fn open(path: &Path, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                return Err(UsageError(format!(
                    "{} is locked by another run; remove {} if that run is gone",
                    path.display(),
                    lock.display()
                ))
                .into())
            }
            Err(e) => return Err(e).with_context(|| format!("locking {}", path.display())),
        }
        let dir = RunDir {
            path: path.to_path_buf(),
            lock,
        };
        dir.write(RESOLVED_CONFIG, config.to_text())?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let first = RunDir::open(tmp.path(), &cfg).unwrap();
        assert!(RunDir::open(tmp.path(), &cfg).is_err());
        drop(first);
        let again = RunDir::open(tmp.path(), &cfg).unwrap();
        assert!(again.file(RESOLVED_CONFIG).exists());
    }
}
