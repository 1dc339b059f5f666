//! Output directory handling: overwrite protection and run metadata.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone)]
pub struct OutDir {
    pub dir: PathBuf,
    pub force: bool,
}

impl OutDir {
    pub fn new(dir: impl Into<PathBuf>, force: bool) -> CliResult<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| dmsl_core::Error::io(&dir, e))?;
        Ok(Self { dir, force })
    }

    /// Path for a new artifact. Existing files are refused unless `force`.
    pub fn file(&self, name: impl AsRef<Path>) -> CliResult<PathBuf> {
        let p = self.dir.join(name);
        if p.exists() && !self.force {
            return Err(CliError::Invalid(format!(
                "refusing to overwrite {} (use --force)",
                p.display()
            )));
        }
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| dmsl_core::Error::io(parent, e))?;
        }
        Ok(p)
    }

    /// Sub-directory for a group of artifacts. Refused when it already
    /// has content, unless `force`.
    pub fn subdir(&self, name: impl AsRef<Path>) -> CliResult<OutDir> {
        let p = self.dir.join(name);
        let occupied = p.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
        if occupied && !self.force {
            return Err(CliError::Invalid(format!(
                "refusing to overwrite {} (use --force)",
                p.display()
            )));
        }
        OutDir::new(p, self.force)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<PathBuf> {
        let p = self.file(name)?;
        let text = serde_json::to_string_pretty(value)?;
        std::fs::write(&p, text + "\n").map_err(|e| dmsl_core::Error::io(&p, e))?;
        Ok(p)
    }
}

/// Commit of the working tree, when the binary runs inside a git checkout
/// or `DMSL_GIT_REV` is set.
pub fn git_rev() -> Option<String> {
    if let Ok(v) = std::env::var("DMSL_GIT_REV") {
        return Some(v);
    }
    let out = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .stderr(std::process::Stdio::null())
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

#[derive(Debug, Serialize)]
pub struct RunInfo<'a> {
    pub command: &'a str,
    pub seed: u64,
    pub version: &'static str,
    pub git_rev: Option<String>,
    pub args: Vec<String>,
}

impl<'a> RunInfo<'a> {
    pub fn new(command: &'a str, seed: u64) -> Self {
        Self {
            command,
            seed,
            version: env!("CARGO_PKG_VERSION"),
            git_rev: git_rev(),
            args: std::env::args().collect(),
        }
    }
}
