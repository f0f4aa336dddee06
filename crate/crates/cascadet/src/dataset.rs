//! Dataset ingestion: a JSON manifest pointing at a JSONL annotation file,
//! or the annotation file itself.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use cascadet_core::cascade::FrameRecord;
use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(default)]
    pub name: Option<String>,
    /// Annotation file, relative to the manifest.
    pub annotations: PathBuf,
    /// Hex SHA-256 of the annotation file.
    pub sha256: String,
    /// Frames to use, in order. Empty means every annotated frame.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub frames: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<FrameRecord>,
    /// Hex SHA-256 of the annotation bytes.
    pub sha256: String,
}

impl Dataset {
    pub fn frame_map(&self) -> BTreeMap<&str, &FrameRecord> {
        self.frames.iter().map(|f| (f.frame_id.as_str(), f)).collect()
    }
}

/// Loads a manifest (`.json`) or a bare annotation file (anything else).
pub fn load(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: DatasetManifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::line(path, e.line(), e))?;
        load_manifest(&manifest, path.parent().unwrap_or(Path::new("")))
    } else {
        let frames = parse_annotations(path, &bytes)?;
        Ok(Dataset {
            frames,
            sha256: sha256_hex(&bytes),
        })
    }
}

pub fn load_manifest(manifest: &DatasetManifest, base: &Path) -> Result<Dataset> {
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    let path = base.join(&manifest.annotations);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let actual = sha256_hex(&bytes);
    if !actual.eq_ignore_ascii_case(&manifest.sha256) {
        return Err(Error::Checksum {
            path,
            expected: manifest.sha256.clone(),
            actual,
        });
    }
    let mut frames = parse_annotations(&path, &bytes)?;
    if !manifest.frames.is_empty() {
        let mut by_id: BTreeMap<String, FrameRecord> = frames.into_iter().map(|f| (f.frame_id.clone(), f)).collect();
        frames = manifest
            .frames
            .iter()
            .map(|id| {
                by_id
                    .remove(id)
                    .ok_or_else(|| Error::Dataset(format!("manifest references unknown or repeated frame {id:?}")))
            })
            .collect::<Result<_>>()?;
    }
    Ok(Dataset { frames, sha256: actual })
}

/// One JSON frame record per non-blank line. Frame ids must be unique.
pub fn parse_annotations(path: &Path, bytes: &[u8]) -> Result<Vec<FrameRecord>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut seen = HashSet::new();
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let frame: FrameRecord = serde_json::from_str(line).map_err(|e| Error::line(path, n, e))?;
        frame.validate().map_err(|e| Error::line(path, n, e))?;
        if !seen.insert(frame.frame_id.clone()) {
            return Err(Error::line(path, n, format!("duplicate frame_id {:?}", frame.frame_id)));
        }
        frames.push(frame);
    }
    Ok(frames)
}
