//! Dataset manifest: one JSON file describing a split, its tensor blobs and
//! per-sample instance annotations. Paths are relative to the manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlobRef {
    pub path: String,
    pub shape: Vec<usize>,
    pub byte_len: u64,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub category_id: usize,
    /// (x1, y1, x2, y2) in pixels, x2 > x1 and y2 > y1.
    pub box_xyxy: [f32; 4],
    /// Row index into the masks blob.
    pub mask_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorStamp {
    pub seed: u64,
    pub config: crate::config::GeneratorConfig,
    pub config_hash: String,
    pub version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: String,
    pub sample_count: usize,
    pub category_names: Vec<String>,
    pub image_shape: [usize; 3],
    pub voxel_dim: usize,
    pub blobs: ManifestBlobs,
    /// Per-sample instance lists.
    pub annotations: Vec<Vec<InstanceAnnotation>>,
    pub generator: Option<GeneratorStamp>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestBlobs {
    pub images: BlobRef,
    pub voxels: BlobRef,
    pub teacher_g: BlobRef,
    pub teacher_z: BlobRef,
    pub masks: BlobRef,
}

impl DatasetManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&json)?;
        m.validate(path.parent().unwrap_or(Path::new(".")))?;
        Ok(m)
    }

    pub fn validate(&self, base: &Path) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Config {
                key: "format_version".into(),
                msg: format!("unsupported manifest version {}", self.format_version),
            });
        }
        if self.annotations.len() != self.sample_count {
            return Err(Error::Config {
                key: "annotations".into(),
                msg: format!(
                    "manifest declares {} samples but has {} annotation lists",
                    self.sample_count,
                    self.annotations.len()
                ),
            });
        }
        for blob in [
            &self.blobs.images,
            &self.blobs.voxels,
            &self.blobs.teacher_g,
            &self.blobs.teacher_z,
            &self.blobs.masks,
        ] {
            let full = base.join(&blob.path);
            let meta = std::fs::metadata(&full).map_err(|e| Error::io(&full, e))?;
            if meta.len() != blob.byte_len {
                return Err(Error::Format {
                    path: full,
                    offset: 0,
                    reason: format!(
                        "declared byte length {} does not match file size {}",
                        blob.byte_len,
                        meta.len()
                    ),
                });
            }
        }
        for (leading, name) in [
            (self.blobs.images.shape.first(), "images"),
            (self.blobs.voxels.shape.first(), "voxels"),
            (self.blobs.teacher_g.shape.first(), "teacher_g"),
            (self.blobs.teacher_z.shape.first(), "teacher_z"),
        ] {
            if leading != Some(&self.sample_count) {
                return Err(Error::Config {
                    key: format!("blobs.{name}"),
                    msg: "leading extent must equal sample_count".into(),
                });
            }
        }
        Ok(())
    }
}

pub fn blob_ref_for(path_rel: &str, shape: &[usize], base: &Path) -> Result<BlobRef> {
    let full: PathBuf = base.join(path_rel);
    let meta = std::fs::metadata(&full).map_err(|e| Error::io(&full, e))?;
    Ok(BlobRef {
        path: path_rel.to_string(),
        shape: shape.to_vec(),
        byte_len: meta.len(),
        offset: 0,
    })
}
