//! JSON-lines dataset manifests and in-memory samples.
//!
//! One object per line:
//!
//! ```json
//! {"id":"train_0003","path":"images/train_0003.png","split":"train","class":2,
//!  "boxes":[{"part":0,"bbox":{"top":4,"left":20,"bottom":17,"right":33}}],
//!  "provenance":"in_domain"}
//! ```
//!
//! `path` is relative to the manifest's directory. `class` is absent for
//! unlabeled images; `boxes` is optional.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BBox, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Unlabeled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    InDomain,
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartBox {
    pub part: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<PartBox>>,
    #[serde(default = "in_domain")]
    pub provenance: Provenance,
}

fn in_domain() -> Provenance {
    Provenance::InDomain
}

/// An image with a fine-grained class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub class: usize,
    pub image: Image,
}

/// An image without a fine-grained class.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolImage {
    pub id: String,
    pub image: Image,
    pub provenance: Provenance,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

pub fn resolve(manifest: &Path, entry: &ManifestEntry) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(&entry.path)
}

/// Loads every labeled image of `split`.
pub fn load_labeled(manifest: &Path, split: Split) -> Result<Vec<LabeledImage>> {
    let entries = read_manifest(manifest)?;
    let mut out = Vec::new();
    for (i, e) in entries.iter().enumerate().filter(|(_, e)| e.split == split) {
        let class = e.class.ok_or_else(|| Error::Manifest {
            path: manifest.to_path_buf(),
            line: i + 1,
            message: format!("{} has no class", e.id),
        })?;
        out.push(LabeledImage {
            id: e.id.clone(),
            class,
            image: Image::load_png(&resolve(manifest, e))?,
        });
    }
    Ok(out)
}

/// Loads every image of `split`, ignoring any class.
pub fn load_pool(manifest: &Path, split: Split) -> Result<Vec<PoolImage>> {
    read_manifest(manifest)?
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            Ok(PoolImage {
                id: e.id.clone(),
                image: Image::load_png(&resolve(manifest, e))?,
                provenance: e.provenance,
            })
        })
        .collect()
}
