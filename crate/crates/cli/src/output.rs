//! All-or-nothing file output.

use std::io::Write;
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

use crate::CliError;

/// Stage every file next to its destination, then rename them into place.
/// Nothing is written if any staging step fails.
pub fn write_files(files: Vec<(PathBuf, Vec<u8>)>) -> Result<(), CliError> {
    let mut staged = Vec::with_capacity(files.len());
    for (path, bytes) in files {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let mut tmp = NamedTempFile::new_in(&dir).map_err(|e| io_err(&path, e))?;
        tmp.write_all(&bytes).map_err(|e| io_err(&path, e))?;
        tmp.flush().map_err(|e| io_err(&path, e))?;
        staged.push((tmp, path));
    }
    for (tmp, path) in staged {
        tmp.persist(&path).map_err(|e| io_err(&path, e.error))?;
    }
    Ok(())
}

/// Write to `path`, or to stdout when there is none.
pub fn emit(path: Option<&Path>, text: String) -> Result<(), CliError> {
    match path {
        Some(p) => write_files(vec![(p.to_path_buf(), text.into_bytes())]),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
