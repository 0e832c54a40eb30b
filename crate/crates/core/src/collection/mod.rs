//! Multi-dataset data model.
//!
//! Classes are identified by `(dataset_id, local_index)`. Two datasets that
//! both label "spleen" own two distinct classes; nothing is ever merged by
//! name. The global class axis is dataset-major and fixed at manifest load,
//! and every tensor with a class axis uses that order.

mod grid;
mod manifest;
mod volume;

pub use grid::Grid3;
pub use manifest::{
    load_manifest, CaseEntry, ClassRef, CollectionManifest, DatasetDescriptor, ManifestCase, ManifestClass,
    ManifestDataset, ManifestFile, Split,
};
pub use volume::{read_volume, write_volume, Volume, VolumeData, MTVL_MAGIC, MTVL_VERSION};

use crate::Result;

/// One loaded case: the image and one binary mask per local class of its
/// dataset. Masks may overlap.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub dataset_id: u32,
    pub image: Grid3<f32>,
    pub masks: Vec<Grid3<u8>>,
}

impl Case {
    pub fn new(id: String, dataset_id: u32, image: Grid3<f32>, masks: Vec<Grid3<u8>>) -> Result<Self> {
        for (i, m) in masks.iter().enumerate() {
            if m.shape() != image.shape() {
                return Err(crate::Error::Shape(format!(
                    "case {id}: mask {i} has shape {:?}, image {:?}",
                    m.shape(),
                    image.shape()
                )));
            }
            if m.data().iter().any(|&v| v > 1) {
                return Err(crate::Error::Manifest(format!("case {id}: mask {i} is not binary")));
            }
        }
        Ok(Case {
            id,
            dataset_id,
            image,
            masks,
        })
    }
}

/// Binary indicator over the global classes: entry `c` is 1 iff class `c`
/// belongs to `dataset_id`.
pub fn annotation_mask_vector(dataset_id: u32, manifest: &CollectionManifest) -> Result<Vec<u8>> {
    if manifest.dataset(dataset_id).is_none() {
        return Err(crate::Error::UnknownDataset(dataset_id));
    }
    Ok(manifest
        .global_classes
        .iter()
        .map(|c| u8::from(c.dataset_id == dataset_id))
        .collect())
}
