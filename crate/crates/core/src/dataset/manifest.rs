//! Session manifest: one `path, label, orientation` line per session.
//!
//! Relative paths resolve against the manifest's directory. The orientation
//! column is optional (`-` or absent means untagged); `#` starts a comment.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::DatasetError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub orientation_deg: Option<i32>,
}

pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| DatasetError::Manifest { line: n + 1, reason };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(2..=3).contains(&fields.len()) || fields[0].is_empty() {
            return Err(err(format!("expected `path, label[, orientation]`, got `{line}`")));
        }
        let label = fields[1]
            .parse::<usize>()
            .map_err(|_| err(format!("label `{}` is not a class index", fields[1])))?;
        let orientation_deg = match fields.get(2) {
            None | Some(&"-") | Some(&"") => None,
            Some(o) => Some(
                o.parse::<i32>()
                    .map_err(|_| err(format!("orientation `{o}` is not an integer")))?,
            ),
        };
        let path = PathBuf::from(fields[0]);
        let path = if path.is_absolute() { path } else { base_dir.join(path) };
        entries.push(ManifestEntry {
            path,
            label,
            orientation_deg,
        });
    }
    Ok(entries)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Writes entries with paths relative to the manifest directory when possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = String::from("# path, label, orientation_deg\n");
    for e in entries {
        let p = e.path.strip_prefix(base).unwrap_or(&e.path);
        let o = e.orientation_deg.map_or_else(|| "-".to_string(), |o| o.to_string());
        let _ = writeln!(out, "{}, {}, {}", p.display(), e.label, o);
    }
    fs::write(path, out).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}
