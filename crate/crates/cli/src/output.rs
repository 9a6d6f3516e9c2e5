//! Output staging: everything is written under a temporary name next to the
//! destination and renamed into place only once the command succeeds, so an
//! aborted command leaves nothing behind.

use std::fs;
use std::path::{Path, PathBuf};

use crate::commands::CliError;

fn staging_name(target: &Path) -> PathBuf {
    let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    target.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

fn refuse_existing(target: &Path, force: bool) -> Result<(), CliError> {
    if target.exists() && !force {
        return Err(CliError::Exists(target.to_path_buf()));
    }
    Ok(())
}

fn remove_any(path: &Path) -> std::io::Result<()> {
    if path.is_dir() {
        fs::remove_dir_all(path)
    } else {
        fs::remove_file(path)
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// An output directory under construction.
pub struct StagedDir {
    target: PathBuf,
    tmp: PathBuf,
    done: bool,
}

impl StagedDir {
    pub fn new(target: &Path, force: bool) -> Result<Self, CliError> {
        refuse_existing(target, force)?;
        if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io(parent))?;
        }
        let tmp = staging_name(target);
        if tmp.exists() {
            remove_any(&tmp).map_err(io(&tmp))?;
        }
        fs::create_dir_all(&tmp).map_err(io(&tmp))?;
        Ok(Self {
            target: target.to_path_buf(),
            tmp,
            done: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn commit(mut self) -> Result<PathBuf, CliError> {
        if self.target.exists() {
            remove_any(&self.target).map_err(io(&self.target))?;
        }
        fs::rename(&self.tmp, &self.target).map_err(io(&self.target))?;
        self.done = true;
        Ok(self.target.clone())
    }
}

impl Drop for StagedDir {
    fn drop(&mut self) {
        if !self.done {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

/// A set of output files committed together. They are written into a
/// scratch directory beside the first target and moved out on commit.
pub struct StagedFiles {
    dir: StagedDir,
    targets: Vec<PathBuf>,
}

impl StagedFiles {
    pub fn new(targets: &[PathBuf], force: bool) -> Result<Self, CliError> {
        for t in targets {
            refuse_existing(t, force)?;
        }
        let first = targets.first().expect("at least one output file");
        let dir = StagedDir::new(&first.with_extension("staging"), true)?;
        Ok(Self {
            dir,
            targets: targets.to_vec(),
        })
    }

    /// Temporary path to write in place of `target`.
    pub fn path_for(&self, target: &Path) -> PathBuf {
        self.dir.path().join(target.file_name().expect("file target"))
    }

    /// Moves every written file into place; targets that were not written are skipped.
    pub fn commit(self) -> Result<(), CliError> {
        for target in &self.targets {
            let tmp = self.path_for(target);
            if !tmp.exists() {
                continue;
            }
            if let Some(parent) = target.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(io(parent))?;
            }
            if target.exists() {
                remove_any(target).map_err(io(target))?;
            }
            fs::rename(&tmp, target).map_err(io(target))?;
        }
        Ok(())
    }
}
