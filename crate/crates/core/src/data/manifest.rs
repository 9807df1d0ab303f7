use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One case path per line. Relative paths resolve against the manifest's
/// directory; blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let entries: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| base.join(l))
        .collect();
    if entries.is_empty() {
        return Err(Error::parse(0, format!("manifest {} lists no cases", path.display())));
    }
    Ok(entries)
}

/// Writes entries relative to the manifest's directory where possible.
pub fn write_manifest(path: &Path, entries: &[PathBuf]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for e in entries {
        let rel = e.strip_prefix(base).unwrap_or(e);
        text.push_str(&rel.to_string_lossy());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
