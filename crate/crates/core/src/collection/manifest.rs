use std::collections::{BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_volume, Case};
use crate::{Error, Result};

/// A class in the global namespace. Identity is `(dataset_id, local_index)`;
/// the name is only a label.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassRef {
    pub dataset_id: u32,
    pub local_index: u32,
    pub name: String,
    #[serde(default)]
    pub group_tags: BTreeSet<String>,
    /// Underlying structure, when the collection records one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<String>,
}

impl ClassRef {
    pub fn key(&self) -> (u32, u32) {
        (self.dataset_id, self.local_index)
    }

    pub fn has_tag(&self, tag: &str) -> bool {
        self.group_tags.contains(tag)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub dataset_id: u32,
    pub name: String,
    pub classes: Vec<ClassRef>,
    pub case_count: usize,
    pub voxel_spacing: [f64; 3],
}

// On-disk schema.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    /// Names of the structures whose neutral masks each case lists in `truth`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub structures: Vec<String>,
    pub datasets: Vec<ManifestDataset>,
    pub cases: Vec<ManifestCase>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestDataset {
    pub id: u32,
    pub name: String,
    pub classes: Vec<ManifestClass>,
    pub spacing: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestClass {
    pub name: String,
    #[serde(default)]
    pub group_tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCase {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub dataset_id: u32,
    pub image: String,
    pub masks: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub held_out: bool,
    /// Neutral per-structure truth written by the phantom generator.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub truth: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseEntry {
    pub id: String,
    pub dataset_id: u32,
    pub image: PathBuf,
    pub masks: Vec<PathBuf>,
    pub held_out: bool,
    pub truth: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
    All,
}

impl Split {
    fn accepts(self, held_out: bool) -> bool {
        match self {
            Split::Train => !held_out,
            Split::HeldOut => held_out,
            Split::All => true,
        }
    }
}

/// Validated collection: datasets, the dataset-major global class list, and
/// case paths resolved against the manifest directory.
#[derive(Clone, Debug, PartialEq)]
pub struct CollectionManifest {
    pub structures: Vec<String>,
    pub datasets: Vec<DatasetDescriptor>,
    pub global_classes: Vec<ClassRef>,
    pub cases: Vec<CaseEntry>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<CollectionManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    CollectionManifest::from_file(file, root)
}

impl CollectionManifest {
    /// Validates a parsed manifest; relative paths are resolved against `root`.
    pub fn from_file(file: ManifestFile, root: &Path) -> Result<Self> {
        let mut seen = HashSet::new();
        for d in &file.datasets {
            if !seen.insert(d.id) {
                return Err(Error::Manifest(format!("duplicate dataset_id {}", d.id)));
            }
            if d.classes.is_empty() {
                return Err(Error::Manifest(format!("dataset {} has no classes", d.id)));
            }
            if d.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                return Err(Error::Manifest(format!("dataset {} has non-positive spacing", d.id)));
            }
            for c in &d.classes {
                if let Some(st) = &c.structure {
                    if !file.structures.contains(st) {
                        return Err(Error::Manifest(format!(
                            "class {} of dataset {} names unknown structure {st}",
                            c.name, d.id
                        )));
                    }
                }
            }
        }
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                root.join(p)
            }
        };
        let mut cases = Vec::with_capacity(file.cases.len());
        for (i, c) in file.cases.iter().enumerate() {
            let Some(ds) = file.datasets.iter().find(|d| d.id == c.dataset_id) else {
                return Err(Error::Manifest(format!(
                    "case {i} references unknown dataset {}",
                    c.dataset_id
                )));
            };
            if c.masks.len() != ds.classes.len() {
                return Err(Error::Manifest(format!(
                    "mask count mismatch: case {i} lists {} masks, dataset {} has {} classes",
                    c.masks.len(),
                    ds.id,
                    ds.classes.len()
                )));
            }
            if !c.truth.is_empty() && c.truth.len() != file.structures.len() {
                return Err(Error::Manifest(format!(
                    "case {i} lists {} truth masks for {} structures",
                    c.truth.len(),
                    file.structures.len()
                )));
            }
            cases.push(CaseEntry {
                id: c.id.clone().unwrap_or_else(|| format!("case{i:04}")),
                dataset_id: c.dataset_id,
                image: resolve(&c.image),
                masks: c.masks.iter().map(|m| resolve(m)).collect(),
                held_out: c.held_out,
                truth: c.truth.iter().map(|t| resolve(t)).collect(),
            });
        }
        let mut datasets = Vec::with_capacity(file.datasets.len());
        let mut global_classes = Vec::new();
        for d in &file.datasets {
            let classes: Vec<ClassRef> = d
                .classes
                .iter()
                .enumerate()
                .map(|(j, c)| ClassRef {
                    dataset_id: d.id,
                    local_index: j as u32,
                    name: c.name.clone(),
                    group_tags: c.group_tags.iter().cloned().collect(),
                    structure: c.structure.clone(),
                })
                .collect();
            global_classes.extend(classes.iter().cloned());
            let case_count = cases.iter().filter(|c| c.dataset_id == d.id).count();
            if case_count == 0 {
                return Err(Error::Manifest(format!("dataset {} has no cases", d.id)));
            }
            datasets.push(DatasetDescriptor {
                dataset_id: d.id,
                name: d.name.clone(),
                classes,
                case_count,
                voxel_spacing: d.spacing,
            });
        }
        Ok(CollectionManifest {
            structures: file.structures,
            datasets,
            global_classes,
            cases,
        })
    }

    pub fn dataset(&self, dataset_id: u32) -> Option<&DatasetDescriptor> {
        self.datasets.iter().find(|d| d.dataset_id == dataset_id)
    }

    pub fn num_classes(&self) -> usize {
        self.global_classes.len()
    }

    /// Offset of a dataset's first class on the global class axis.
    pub fn class_offset(&self, dataset_id: u32) -> Result<usize> {
        let mut offset = 0;
        for d in &self.datasets {
            if d.dataset_id == dataset_id {
                return Ok(offset);
            }
            offset += d.classes.len();
        }
        Err(Error::UnknownDataset(dataset_id))
    }

    pub fn global_index(&self, class: &ClassRef) -> Option<usize> {
        self.global_classes.iter().position(|c| c.key() == class.key())
    }

    pub fn case_indices(&self, split: Split) -> Vec<usize> {
        (0..self.cases.len())
            .filter(|&i| split.accepts(self.cases[i].held_out))
            .collect()
    }

    /// Same class namespace, restricted to the cases of one split. Datasets
    /// left without cases keep their classes but report `case_count = 0`.
    pub fn with_split(&self, split: Split) -> CollectionManifest {
        let cases: Vec<CaseEntry> = self
            .cases
            .iter()
            .filter(|c| split.accepts(c.held_out))
            .cloned()
            .collect();
        let datasets = self
            .datasets
            .iter()
            .map(|d| DatasetDescriptor {
                case_count: cases.iter().filter(|c| c.dataset_id == d.dataset_id).count(),
                ..d.clone()
            })
            .collect();
        CollectionManifest {
            structures: self.structures.clone(),
            datasets,
            global_classes: self.global_classes.clone(),
            cases,
        }
    }

    /// Sub-collection with only the listed datasets (in the given order).
    pub fn select_datasets(&self, ids: &[u32]) -> Result<CollectionManifest> {
        let mut datasets = Vec::new();
        for &id in ids {
            datasets.push(self.dataset(id).ok_or(Error::UnknownDataset(id))?.clone());
        }
        let global_classes = datasets.iter().flat_map(|d| d.classes.iter().cloned()).collect();
        let cases = self
            .cases
            .iter()
            .filter(|c| ids.contains(&c.dataset_id))
            .cloned()
            .collect();
        Ok(CollectionManifest {
            structures: self.structures.clone(),
            datasets,
            global_classes,
            cases,
        })
    }

    /// Position of a structure in each case's `truth` list.
    pub fn structure_index(&self, name: &str) -> Option<usize> {
        self.structures.iter().position(|s| s == name)
    }

    /// Neutral truth mask of one structure for one case.
    pub fn load_truth(&self, index: usize, structure: &str) -> Result<super::Grid3<u8>> {
        let entry = self
            .cases
            .get(index)
            .ok_or_else(|| Error::Manifest(format!("case index {index} out of range")))?;
        let k = self
            .structure_index(structure)
            .ok_or_else(|| Error::Manifest(format!("unknown structure {structure}")))?;
        let path = entry
            .truth
            .get(k)
            .ok_or_else(|| Error::Manifest(format!("case {} has no truth masks", entry.id)))?;
        Ok(read_volume(path)?.into_mask())
    }

    pub fn load_case(&self, index: usize) -> Result<Case> {
        let entry = self
            .cases
            .get(index)
            .ok_or_else(|| Error::Manifest(format!("case index {index} out of range")))?;
        let image = read_volume(&entry.image)?.into_f32();
        let masks = entry
            .masks
            .iter()
            .map(|p| read_volume(p).map(|v| v.into_mask()))
            .collect::<Result<Vec<_>>>()?;
        Case::new(entry.id.clone(), entry.dataset_id, image, masks)
    }
}
