//! Binary formats, bit packing and the per-profile storage accounting.

pub mod accounting;
pub mod bits;
pub mod bytes;
pub mod profile;

use std::path::Path;

use crate::error::Result;

/// Writes to a sibling temporary file, then renames over `path`.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
