//! Internal file helpers: atomic writes (write-temp-then-rename) and
//! error-tagged reads, shared by dataset, checkpoint, and CSV I/O.

use std::fs;
use std::path::Path;

use crate::{Error, Result};

/// Writes `contents` to `path` atomically: the bytes land in a temporary
/// sibling file first and are renamed into place, so readers never observe a
/// half-written file.
pub(crate) fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidInput(format!("output path {:?} has no file name", path)))?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}
