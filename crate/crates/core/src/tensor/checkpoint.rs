use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub requires_grad: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub entries: Vec<CheckpointEntry>,
    pub blob_len: usize,
}

/// Named tensors as a JSON manifest plus a little-endian `f32` blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub blob: Vec<u8>,
}

impl Checkpoint {
    pub fn from_tensors<'a>(tensors: impl IntoIterator<Item = (String, &'a Tensor)>) -> Self {
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        for (name, t) in tensors {
            entries.push(CheckpointEntry {
                name,
                shape: t.shape().to_vec(),
                offset: blob.len(),
                requires_grad: t.requires_grad(),
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        Checkpoint {
            manifest: CheckpointManifest {
                version: CHECKPOINT_VERSION,
                blob_len: blob.len(),
                entries,
            },
            blob,
        }
    }

    /// Decodes every entry, in manifest order.
    pub fn tensors(&self) -> Result<Vec<(String, Tensor)>> {
        if self.manifest.version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: self.manifest.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if self.blob.len() != self.manifest.blob_len {
            return Err(Error::Malformed(format!(
                "blob has {} bytes, manifest declares {}",
                self.blob.len(),
                self.manifest.blob_len
            )));
        }
        self.manifest
            .entries
            .iter()
            .map(|e| {
                let numel: usize = e.shape.iter().product();
                let end = e.offset + 4 * numel;
                let bytes = self
                    .blob
                    .get(e.offset..end)
                    .ok_or_else(|| Error::Malformed(format!("entry `{}` exceeds the blob", e.name)))?;
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                let t = Tensor::new(e.shape.clone(), data)?.with_requires_grad(e.requires_grad);
                Ok((e.name.clone(), t))
            })
            .collect()
    }

    fn paths(stem: &Path) -> (PathBuf, PathBuf) {
        let base = stem.as_os_str().to_string_lossy();
        (
            PathBuf::from(format!("{base}.params.json")),
            PathBuf::from(format!("{base}.params.bin")),
        )
    }

    /// Writes `<stem>.params.json` and `<stem>.params.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (manifest, blob) = Self::paths(stem);
        fs::write(&manifest, serde_json::to_vec_pretty(&self.manifest)?).map_err(|e| Error::io(&manifest, e))?;
        fs::write(&blob, &self.blob).map_err(|e| Error::io(&blob, e))?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (manifest, blob) = Self::paths(stem);
        let text = fs::read(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let manifest_doc: CheckpointManifest = serde_json::from_slice(&text)?;
        let blob = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
        Ok(Checkpoint {
            manifest: manifest_doc,
            blob,
        })
    }
}
