//! Single-writer lock and progress file for an output directory.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vsdnerf::{Error, Result};

pub const LOCK_FILE: &str = ".lock";
pub const STATUS_FILE: &str = "status.json";

fn pid_alive(pid: u32) -> bool {
    Path::new("/proc").join(pid.to_string()).exists()
}

/// Held while a command writes into a directory. A lock left behind by a dead
/// process is taken over.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    write!(f, "{}", std::process::id()).map_err(|e| Error::io(&path, e))?;
                    return Ok(RunLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok());
                    match holder {
                        Some(pid) if pid_alive(pid) && pid != std::process::id() => {
                            return Err(Error::config(format!(
                                "{} is locked by running process {pid}",
                                dir.display()
                            )))
                        }
                        _ => fs::remove_file(&path).map_err(|e| Error::io(&path, e))?,
                    }
                }
                Err(e) => return Err(Error::io(&path, e)),
            }
        }
        Err(Error::config(format!("could not lock {}", dir.display())))
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub command: String,
    /// `running`, `completed` or `failed`.
    pub state: String,
    pub error: Option<String>,
    pub pid: u32,
}

impl RunStatus {
    pub fn new(command: &str) -> Self {
        RunStatus { command: command.into(), state: "running".into(), error: None, pid: std::process::id() }
    }

    pub fn completed(&self) -> Self {
        RunStatus { state: "completed".into(), ..self.clone() }
    }

    pub fn failed(&self, e: &Error) -> Self {
        RunStatus { state: "failed".into(), error: Some(e.to_string()), ..self.clone() }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let p = dir.join(STATUS_FILE);
        fs::write(&p, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&p, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(STATUS_FILE);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::ingestion(&p, e.to_string()))
    }
}
