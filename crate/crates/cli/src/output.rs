use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::CliError;

/// Files of one command, written as `*.partial` and renamed into place only
/// on [`commit`](Self::commit). Anything not committed is removed on drop.
pub(crate) struct OutputSet {
    dir: PathBuf,
    staged: Vec<(PathBuf, PathBuf)>,
    created_dirs: Vec<PathBuf>,
    committed: bool,
}

impl OutputSet {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        let mut created_dirs = Vec::new();
        let mut missing = Vec::new();
        let mut p = dir.to_path_buf();
        while !p.as_os_str().is_empty() && !p.exists() {
            missing.push(p.clone());
            if !p.pop() {
                break;
            }
        }
        fs::create_dir_all(dir)?;
        created_dirs.extend(missing);
        Ok(Self { dir: dir.to_path_buf(), staged: Vec::new(), created_dirs, committed: false })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let target = self.dir.join(name);
        if let Some(parent) = target.parent() {
            if !parent.exists() {
                fs::create_dir_all(parent)?;
                self.created_dirs.insert(0, parent.to_path_buf());
            }
        }
        let partial = target.with_file_name(format!(
            "{}.partial",
            target.file_name().and_then(|n| n.to_str()).unwrap_or("out")
        ));
        let mut f = fs::File::create(&partial)?;
        self.staged.push((partial, target));
        f.write_all(bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>, CliError> {
        let mut done = Vec::new();
        for (partial, target) in &self.staged {
            fs::rename(partial, target)
                .map_err(|e| CliError::Output(format!("cannot move {} into place: {e}", target.display())))?;
            done.push(target.clone());
        }
        self.committed = true;
        Ok(done)
    }
}

impl Drop for OutputSet {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for (partial, _) in &self.staged {
            let _ = fs::remove_file(partial);
        }
        // Only directories this command created, innermost first, and only if empty.
        for d in &self.created_dirs {
            let _ = fs::remove_dir(d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_vanish() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("a/b");
        {
            let mut o = OutputSet::new(&dir).unwrap();
            o.write("x.txt", b"hi").unwrap();
            o.write("sub/y.txt", b"hi").unwrap();
        }
        assert!(!tmp.path().join("a").exists());
    }

    #[test]
    fn committed_outputs_stay() {
        let tmp = tempfile::tempdir().unwrap();
        let mut o = OutputSet::new(tmp.path()).unwrap();
        o.write("x.txt", b"hi").unwrap();
        let files = o.commit().unwrap();
        assert_eq!(fs::read(&files[0]).unwrap(), b"hi");
        assert!(!tmp.path().join("x.txt.partial").exists());
    }
}
