//! Dataset format, synthetic generator and batching.

mod batch;
mod blob;
pub mod generator;
mod manifest;

pub use batch::epoch_batches;
pub use blob::{read_tensor_blob, write_tensor_blob};
pub use generator::{generate_samples, generate_synthetic_dataset, scene_descriptor, SHAPE_NAMES};
pub use manifest::{
    BlobRef, DatasetManifest, GeneratorStamp, InstanceAnnotation, ManifestBlobs, MANIFEST_VERSION,
};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A split loaded fully into memory (desk-scale datasets are a few MB).
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Tensor,
    pub voxels: Tensor,
    pub teacher_g: Tensor,
    pub teacher_z: Tensor,
    pub masks: Tensor,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let images = read_tensor_blob(&base.join(&manifest.blobs.images.path))?;
        let voxels = read_tensor_blob(&base.join(&manifest.blobs.voxels.path))?;
        let teacher_g = read_tensor_blob(&base.join(&manifest.blobs.teacher_g.path))?;
        let teacher_z = read_tensor_blob(&base.join(&manifest.blobs.teacher_z.path))?;
        let masks = read_tensor_blob(&base.join(&manifest.blobs.masks.path))?;
        for (blob, tensor, name) in [
            (&manifest.blobs.images, &images, "images"),
            (&manifest.blobs.voxels, &voxels, "voxels"),
            (&manifest.blobs.teacher_g, &teacher_g, "teacher_g"),
            (&manifest.blobs.teacher_z, &teacher_z, "teacher_z"),
            (&manifest.blobs.masks, &masks, "masks"),
        ] {
            if blob.shape != tensor.shape() {
                return Err(Error::ShapeMismatch {
                    op: "dataset_load",
                    expected: blob.shape.clone(),
                    got: tensor.shape().to_vec(),
                });
            }
            tensor.ensure_finite("dataset_load", name)?;
        }
        Ok(Dataset {
            manifest,
            images,
            voxels,
            teacher_g,
            teacher_z,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.sample_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn slice_leading(t: &Tensor, index: usize) -> Tensor {
        let tail = &t.shape()[1..];
        let stride: usize = tail.iter().product();
        Tensor::from_vec(tail, t.data()[index * stride..(index + 1) * stride].to_vec())
            .expect("slice shape")
    }

    /// Image i as [C,H,W].
    pub fn image(&self, i: usize) -> Tensor {
        Self::slice_leading(&self.images, i)
    }

    /// Voxel vector i as [d_v].
    pub fn voxel(&self, i: usize) -> Tensor {
        Self::slice_leading(&self.voxels, i)
    }

    pub fn teacher_g_row(&self, i: usize) -> Tensor {
        Self::slice_leading(&self.teacher_g, i)
    }

    pub fn teacher_z_row(&self, i: usize) -> Tensor {
        Self::slice_leading(&self.teacher_z, i)
    }

    pub fn mask(&self, mask_index: usize) -> Tensor {
        Self::slice_leading(&self.masks, mask_index)
    }

    pub fn annotations(&self, i: usize) -> &[InstanceAnnotation] {
        &self.manifest.annotations[i]
    }

    /// Rows of raw voxels gathered into a [n, d_v] matrix.
    pub fn gather_voxels(&self, idx: &[usize]) -> Tensor {
        let d = self.voxels.shape()[1];
        let mut out = Tensor::zeros(&[idx.len(), d]);
        for (r, &i) in idx.iter().enumerate() {
            out.data_mut()[r * d..(r + 1) * d]
                .copy_from_slice(&self.voxels.data()[i * d..(i + 1) * d]);
        }
        out
    }

    /// Teacher embeddings gathered and flattened into [n, T*D].
    pub fn gather_teacher_g_flat(&self, idx: &[usize]) -> Tensor {
        let td: usize = self.teacher_g.shape()[1..].iter().product();
        let mut out = Tensor::zeros(&[idx.len(), td]);
        for (r, &i) in idx.iter().enumerate() {
            out.data_mut()[r * td..(r + 1) * td]
                .copy_from_slice(&self.teacher_g.data()[i * td..(i + 1) * td]);
        }
        out
    }
}
