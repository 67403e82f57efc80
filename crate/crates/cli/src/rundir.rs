//! Run directories: the resolved config snapshot, epoch log, checkpoints
//! and a lock against concurrent writers.

use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use crate::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const BEST_CKPT: &str = "best.ckpt.json";
pub const LAST_CKPT: &str = "last.ckpt.json";
const LOCK_FILE: &str = ".lock";

/// Exclusive hold on a run directory; released on drop.
#[derive(Debug)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Locks `path`, creating it for a fresh run. An existing run is only
    /// reopened with `resume`.
    pub fn open(path: &Path, resume: bool) -> CliResult<Self> {
        let has_run = path.join(CONFIG_FILE).exists();
        match (has_run, resume) {
            (true, false) => {
                return Err(CliError::Runtime(format!(
                    "run directory {} already holds a run; pass --resume to continue it",
                    path.display()
                )))
            }
            (false, true) => {
                return Err(CliError::Runtime(format!(
                    "nothing to resume: {} has no {CONFIG_FILE}",
                    path.display()
                )))
            }
            _ => {}
        }
        fs::create_dir_all(path)?;
        let lock = path.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => writeln!(f, "{}", std::process::id())?,
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                let owner = fs::read_to_string(&lock).unwrap_or_default();
                return Err(CliError::Runtime(format!(
                    "run directory {} is locked by process {} (delete {} if that process is gone)",
                    path.display(),
                    owner.trim(),
                    lock.display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Appends one JSON line to the epoch log.
    pub fn log_epoch(&self, line: &impl serde::Serialize) -> relay_jscc::Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.file(EPOCH_LOG))?;
        let text = serde_json::to_string(line)?;
        writeln!(f, "{text}")?;
        Ok(())
    }

    /// Drops log lines past `epochs`, left behind by a run that stopped
    /// between logging an epoch and checkpointing it.
    pub fn truncate_log(&self, epochs: usize) -> CliResult<()> {
        let path = self.file(EPOCH_LOG);
        if !path.exists() {
            return Ok(());
        }
        let text = fs::read_to_string(&path)?;
        let kept: String = text.lines().take(epochs).map(|l| format!("{l}\n")).collect();
        let mut f = File::create(&path)?;
        f.write_all(kept.as_bytes())?;
        Ok(())
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}

/// `<output_dir>/<scheme>-<UTC timestamp>`.
pub fn timestamped(output_dir: &Path, scheme: &str) -> PathBuf {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    output_dir.join(format!("{scheme}-{stamp}"))
}
