//! Report and checkpoint output: atomic writes (temp file + rename in the
//! destination directory) and SHA-256 digests of every input consumed, so a
//! report records exactly what it was computed from.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::fail::{CliFailure, Result};

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &str) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| CliFailure::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digest map for a set of input paths, keyed by the path as given.
pub fn digests<'a>(paths: impl IntoIterator<Item = &'a str>) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        out.insert(p.to_string(), sha256_file(p)?);
    }
    Ok(out)
}

/// Writes bytes to `path` via a temp file in the same directory followed by a
/// rename, so a crash never leaves a half-written file at the destination.
pub fn write_atomic(path: &str, bytes: &[u8]) -> Result<()> {
    let target = Path::new(path);
    if let Some(parent) = target.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| CliFailure::io(path, e))?;
        }
    }
    let tmp = target.with_file_name(format!(
        ".{}.tmp.{}",
        target
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into()),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| CliFailure::io(&tmp.to_string_lossy(), e))?;
    fs::rename(&tmp, target).map_err(|e| CliFailure::io(path, e))?;
    Ok(())
}

/// Pretty-printed JSON with a trailing newline, written atomically.
pub fn write_json_report<T: serde::Serialize>(path: &str, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Inserts a suffix before the extension: `r.json` + `raw_update` →
/// `r.raw_update.json`; extensionless paths get the suffix appended.
pub fn path_with_suffix(path: &str, suffix: &str) -> String {
    let p = Path::new(path);
    match (p.file_stem(), p.extension()) {
        (Some(stem), Some(ext)) => p
            .with_file_name(format!(
                "{}.{suffix}.{}",
                stem.to_string_lossy(),
                ext.to_string_lossy()
            ))
            .to_string_lossy()
            .into_owned(),
        _ => format!("{path}.{suffix}"),
    }
}
