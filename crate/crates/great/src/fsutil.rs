//! Small filesystem helpers with path-carrying errors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes a file atomically: the bytes land in a sibling temp file which is
/// then renamed over the target, so readers never observe a partial file.
/// Parent directories are created as needed.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let display = path.display().to_string();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp_path = std::path::PathBuf::from(tmp);
    fs::write(&tmp_path, contents).map_err(|e| Error::io(tmp_path.display().to_string(), e))?;
    fs::rename(&tmp_path, path).map_err(|e| {
        let _ = fs::remove_file(&tmp_path);
        Error::io(display.clone(), e)
    })?;
    Ok(())
}

/// Reads a file into a string, attaching the path to any error.
pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_atomic_creates_parents_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/c.txt");
        write_atomic(&path, b"payload").unwrap();
        assert_eq!(read_to_string(&path).unwrap(), "payload");
        let leftovers: Vec<_> = std::fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn read_missing_file_names_the_path() {
        let err = read_to_string(Path::new("/nonexistent/xyz.txt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/xyz.txt"));
    }
}
