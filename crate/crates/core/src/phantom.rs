//! Synthetic multi-dataset collections.
//!
//! Every case image contains all configured structures; each dataset labels
//! only some of them, under its own protocol (boundary margin, whether nested
//! substructures are included, axial extent). The neutral per-structure
//! masks are stored alongside for evaluation.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::collection::{
    write_volume, CollectionManifest, Grid3, ManifestCase, ManifestClass, ManifestDataset, ManifestFile, Volume,
};
use crate::rng::{stream, Stream, StreamRng};
use crate::{Error, Result};

/// Blob boundaries deviate from the base ellipsoid by at most this fraction.
const BLOB_AMPLITUDE: f64 = 0.25;
const BLOB_WAVES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    /// Axis-aligned ellipsoid with semi-axes `size * dim`.
    Sphere,
    /// Axis-aligned box with half-extents `size * dim`.
    Box,
    /// Ellipsoid with a smooth random radial perturbation.
    Blob,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructureSpec {
    pub id: String,
    pub shape: ShapeKind,
    /// Fractions of the volume extent, `(x, y, z)`.
    pub center: [f64; 3],
    /// Semi-axes as fractions of the volume extent.
    pub size: [f64; 3],
    pub intensity_mean: f64,
    #[serde(default)]
    pub intensity_std: f64,
    /// Nested structures are clipped to their parent's support.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolVariant {
    /// Dilation steps when positive, erosion steps when negative.
    #[serde(default)]
    pub margin_voxels: i32,
    #[serde(default = "yes")]
    pub include_substructures: bool,
    /// Keep only `z_min <= (z + 0.5) / Z < z_max`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axial_crop: Option<(f64, f64)>,
}

fn yes() -> bool {
    true
}

impl ProtocolVariant {
    pub fn neutral() -> Self {
        ProtocolVariant {
            margin_voxels: 0,
            include_substructures: true,
            axial_crop: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.margin_voxels.abs() > 3 {
            return Err(Error::Config(format!("margin {} outside [-3, 3]", self.margin_voxels)));
        }
        if let Some((lo, hi)) = self.axial_crop {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
                return Err(Error::Config(format!(
                    "axial crop ({lo}, {hi}) must satisfy 0 <= min < max <= 1"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSpec {
    pub structure: String,
    /// Class name; defaults to the structure id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default = "ProtocolVariant::neutral")]
    pub protocol: ProtocolVariant,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub case_count: usize,
    pub annotations: Vec<AnnotationSpec>,
    /// Overrides the collection-wide training fraction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    /// `(X, Y, Z)`.
    pub volume_shape: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing: [f64; 3],
    pub structures: Vec<StructureSpec>,
    pub datasets: Vec<DatasetSpec>,
    pub noise_std: f64,
    pub seed: u64,
    /// Per-case uniform shift of every center, as a fraction of the extent.
    #[serde(default)]
    pub position_jitter: f64,
    /// Per-case relative scale jitter of every size.
    #[serde(default)]
    pub size_jitter: f64,
    /// Cases with local index below `floor(train_fraction * n)` are training
    /// cases, the rest are held out.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn unit_spacing() -> [f64; 3] {
    [1.0; 3]
}

fn default_train_fraction() -> f64 {
    0.8
}

impl GenConfig {
    /// Desk-scale collection: 32^3 volumes, four structures (an organ with a
    /// nested lesion, an elongated vessel, a small blob) and three datasets of
    /// 24, 8 and 40 cases with overlapping, partly conflicting label sets.
    pub fn desk() -> Self {
        let neutral = ProtocolVariant::neutral();
        let ann = |structure: &str, name: &str, protocol: ProtocolVariant, tags: &[&str]| AnnotationSpec {
            structure: structure.into(),
            name: Some(name.into()),
            protocol,
            tags: tags.iter().map(|t| t.to_string()).collect(),
        };
        GenConfig {
            volume_shape: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            structures: vec![
                StructureSpec {
                    id: "organ".into(),
                    shape: ShapeKind::Sphere,
                    center: [0.42, 0.5, 0.5],
                    size: [0.26, 0.22, 0.24],
                    intensity_mean: 1.0,
                    intensity_std: 0.1,
                    parent: None,
                },
                StructureSpec {
                    id: "lesion".into(),
                    shape: ShapeKind::Sphere,
                    center: [0.46, 0.54, 0.5],
                    size: [0.09, 0.09, 0.09],
                    intensity_mean: -0.7,
                    intensity_std: 0.1,
                    parent: Some("organ".into()),
                },
                StructureSpec {
                    id: "vessel".into(),
                    shape: ShapeKind::Box,
                    center: [0.8, 0.3, 0.5],
                    size: [0.05, 0.05, 0.4],
                    intensity_mean: 1.6,
                    intensity_std: 0.1,
                    parent: None,
                },
                StructureSpec {
                    id: "nodule".into(),
                    shape: ShapeKind::Blob,
                    center: [0.22, 0.8, 0.3],
                    size: [0.08, 0.08, 0.08],
                    intensity_mean: 0.8,
                    intensity_std: 0.1,
                    parent: None,
                },
            ],
            datasets: vec![
                DatasetSpec {
                    name: "abdomen".into(),
                    case_count: 24,
                    annotations: vec![
                        ann("organ", "organ", neutral, &["organ"]),
                        ann("lesion", "lesion", neutral, &["lesion"]),
                    ],
                    train_fraction: None,
                },
                DatasetSpec {
                    name: "vascular".into(),
                    case_count: 8,
                    annotations: vec![
                        ann(
                            "organ",
                            "organ w/o lesion",
                            ProtocolVariant {
                                include_substructures: false,
                                ..neutral
                            },
                            &["organ"],
                        ),
                        ann(
                            "vessel",
                            "vessel (upper)",
                            ProtocolVariant {
                                axial_crop: Some((0.5, 1.0)),
                                ..neutral
                            },
                            &["vessel"],
                        ),
                    ],
                    train_fraction: None,
                },
                DatasetSpec {
                    name: "survey".into(),
                    case_count: 40,
                    annotations: vec![
                        ann(
                            "organ",
                            "organ",
                            ProtocolVariant {
                                margin_voxels: 1,
                                ..neutral
                            },
                            &["organ"],
                        ),
                        ann("vessel", "vessel", neutral, &["vessel"]),
                        ann("nodule", "nodule", neutral, &["lesion"]),
                    ],
                    train_fraction: None,
                },
            ],
            noise_std: 0.25,
            seed: 0,
            position_jitter: 0.03,
            size_jitter: 0.1,
            train_fraction: 0.8,
        }
    }

    pub fn structure(&self, id: &str) -> Option<&StructureSpec> {
        self.structures.iter().find(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        if self.volume_shape.iter().any(|&d| d < 8) {
            return Err(Error::Config(format!(
                "volume shape {:?}: every dimension must be >= 8",
                self.volume_shape
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        if !(0.0..0.5).contains(&self.position_jitter) || !(0.0..1.0).contains(&self.size_jitter) {
            return Err(Error::Config("jitter out of range".into()));
        }
        let mut ids = BTreeSet::new();
        for s in &self.structures {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate structure id {}", s.id)));
            }
        }
        for s in &self.structures {
            if !(s.intensity_std >= 0.0) {
                return Err(Error::Config(format!("structure {}: intensity_std must be >= 0", s.id)));
            }
            if s.size.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config(format!("structure {}: sizes must be positive", s.id)));
            }
            if let Some(p) = &s.parent {
                if !ids.contains(p.as_str()) || p == &s.id {
                    return Err(Error::Config(format!("structure {}: unknown parent {p}", s.id)));
                }
            }
            // The most extreme jittered geometry must fit.
            let mut extreme = s.clone();
            for a in 0..3 {
                extreme.size[a] *= 1.0 + self.size_jitter;
            }
            check_bounds(&extreme, self.volume_shape, self.position_jitter)?;
        }
        // Parent chains must terminate.
        for s in &self.structures {
            let mut cur = s;
            for _ in 0..=self.structures.len() {
                match cur.parent.as_deref().and_then(|p| self.structure(p)) {
                    Some(p) => cur = p,
                    None => break,
                }
            }
            if cur.parent.is_some() {
                return Err(Error::Config(format!("structure {}: cyclic parents", s.id)));
            }
        }
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets".into()));
        }
        for d in &self.datasets {
            if d.annotations.is_empty() {
                return Err(Error::Config(format!("dataset {} annotates no structure", d.name)));
            }
            if d.case_count == 0 {
                return Err(Error::Config(format!("dataset {} has no cases", d.name)));
            }
            let f = d.train_fraction.unwrap_or(self.train_fraction);
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!(
                    "dataset {}: train fraction {f} outside [0, 1]",
                    d.name
                )));
            }
            for a in &d.annotations {
                if self.structure(&a.structure).is_none() {
                    return Err(Error::Config(format!(
                        "dataset {} annotates unknown structure {}",
                        d.name, a.structure
                    )));
                }
                a.protocol.validate()?;
            }
        }
        Ok(())
    }
}

fn extent_factor(shape: ShapeKind) -> f64 {
    match shape {
        ShapeKind::Blob => 1.0 + BLOB_AMPLITUDE,
        ShapeKind::Sphere | ShapeKind::Box => 1.0,
    }
}

fn check_bounds(s: &StructureSpec, dims: [usize; 3], center_slack: f64) -> Result<()> {
    for a in 0..3 {
        let n = dims[a] as f64;
        let r = s.size[a] * n * extent_factor(s.shape);
        let lo = (s.center[a] - center_slack) * n - 0.5 - r;
        let hi = (s.center[a] + center_slack) * n - 0.5 + r;
        if lo < -0.5 || hi > n - 0.5 {
            return Err(Error::Config(format!(
                "structure {} exceeds the volume along axis {a}",
                s.id
            )));
        }
    }
    Ok(())
}

/// Smooth radial perturbation of a blob: a few random plane waves over the
/// unit direction.
#[derive(Clone, Debug)]
struct BlobShape {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl BlobShape {
    fn sample(rng: &mut StreamRng) -> Self {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let waves = (0..BLOB_WAVES)
            .map(|_| {
                let mut w = [0.0f64; 3];
                for v in &mut w {
                    *v = normal.sample(rng);
                }
                let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                w.iter_mut().for_each(|v| *v /= norm);
                (
                    w,
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        BlobShape { waves }
    }

    fn radius(&self, u: [f64; 3]) -> f64 {
        let f: f64 = self
            .waves
            .iter()
            .map(|(w, a, phase)| a * (3.0 * (w[0] * u[0] + w[1] * u[1] + w[2] * u[2]) + phase).sin())
            .sum::<f64>()
            / BLOB_WAVES as f64;
        1.0 + BLOB_AMPLITUDE * f
    }
}

/// Support of one structure, ignoring nesting.
fn rasterize(s: &StructureSpec, dims: [usize; 3], blob: Option<&BlobShape>) -> Grid3<u8> {
    let mut m = Grid3::zeros(dims);
    let c: Vec<f64> = (0..3).map(|a| s.center[a] * dims[a] as f64 - 0.5).collect();
    let r: Vec<f64> = (0..3).map(|a| s.size[a] * dims[a] as f64).collect();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let d = [
                    (x as f64 - c[0]) / r[0],
                    (y as f64 - c[1]) / r[1],
                    (z as f64 - c[2]) / r[2],
                ];
                let inside = match s.shape {
                    ShapeKind::Sphere => d.iter().map(|v| v * v).sum::<f64>() <= 1.0,
                    ShapeKind::Box => d.iter().all(|v| v.abs() <= 1.0),
                    ShapeKind::Blob => {
                        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let u = if n > 0.0 {
                            [d[0] / n, d[1] / n, d[2] / n]
                        } else {
                            [1.0, 0.0, 0.0]
                        };
                        n <= blob.expect("blob geometry").radius(u)
                    }
                };
                if inside {
                    m.set(x, y, z, 1);
                }
            }
        }
    }
    m
}

/// One synthetic image and the neutral support of every structure, in
/// `structures` order.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Grid3<f32>,
    pub truth: Vec<Grid3<u8>>,
}

/// Renders the structures as given (no jitter). The image is the sum of the
/// structure intensity fields plus Gaussian noise clipped to three standard
/// deviations. Nested structures are clipped to their parent.
pub fn generate_scene(
    rng: &mut StreamRng,
    structures: &[StructureSpec],
    volume_shape: [usize; 3],
    noise_std: f64,
) -> Result<Scene> {
    if volume_shape.iter().any(|&d| d < 8) {
        return Err(Error::Config(format!(
            "volume shape {volume_shape:?}: every dimension must be >= 8"
        )));
    }
    let index: HashMap<&str, usize> = structures.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut truth = Vec::with_capacity(structures.len());
    for s in structures {
        check_bounds(s, volume_shape, 0.0)?;
        let blob = (s.shape == ShapeKind::Blob).then(|| BlobShape::sample(rng));
        truth.push(rasterize(s, volume_shape, blob.as_ref()));
    }
    // Clip along parent chains; processing in depth order makes clipping
    // transitive.
    let depth = |mut i: usize| {
        let mut d = 0;
        while let Some(p) = structures[i].parent.as_deref().and_then(|p| index.get(p)) {
            i = *p;
            d += 1;
            if d > structures.len() {
                break;
            }
        }
        d
    };
    let mut order: Vec<usize> = (0..structures.len()).collect();
    order.sort_by_key(|&i| depth(i));
    for i in order {
        if let Some(&p) = structures[i].parent.as_deref().and_then(|p| index.get(p)) {
            let parent = truth[p].clone();
            for (v, &pv) in truth[i].data_mut().iter_mut().zip(parent.data()) {
                *v &= pv;
            }
        }
    }

    let mut image = Grid3::<f32>::zeros(volume_shape);
    let mut acc = vec![0.0f64; image.len()];
    for (s, m) in structures.iter().zip(&truth) {
        let texture = Normal::new(0.0, s.intensity_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        for (a, &mv) in acc.iter_mut().zip(m.data()) {
            if mv != 0 {
                *a += s.intensity_mean
                    + if s.intensity_std > 0.0 {
                        texture.sample(rng)
                    } else {
                        0.0
                    };
            }
        }
    }
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Config(e.to_string()))?;
        for a in acc.iter_mut() {
            *a += noise.sample(rng).clamp(-3.0 * noise_std, 3.0 * noise_std);
        }
    }
    for (d, a) in image.data_mut().iter_mut().zip(&acc) {
        *d = *a as f32;
    }
    Ok(Scene { image, truth })
}

/// Per-case z-score normalization; a constant image becomes all zeros.
pub fn zscore(image: &mut Grid3<f32>) {
    let n = image.len() as f64;
    let mean = image.data().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = image.data().iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in image.data_mut() {
        *v = if std > 0.0 {
            ((f64::from(*v) - mean) / std) as f32
        } else {
            0.0
        };
    }
}

const NEIGHBOURS: [[isize; 3]; 6] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];

/// One 6-connected dilation step.
pub fn dilate6(mask: &Grid3<u8>) -> Grid3<u8> {
    let [nx, ny, nz] = mask.shape();
    let mut out = mask.clone();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(x, y, z) == 0
                    && NEIGHBOURS
                        .iter()
                        .any(|d| mask.get_signed(x as isize + d[0], y as isize + d[1], z as isize + d[2]) == Some(1))
                {
                    out.set(x, y, z, 1);
                }
            }
        }
    }
    out
}

/// One 6-connected erosion step; voxels outside the grid count as
/// background.
pub fn erode6(mask: &Grid3<u8>) -> Grid3<u8> {
    let [nx, ny, nz] = mask.shape();
    let mut out = mask.clone();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.get(x, y, z) == 1
                    && NEIGHBOURS
                        .iter()
                        .any(|d| mask.get_signed(x as isize + d[0], y as isize + d[1], z as isize + d[2]) != Some(1))
                {
                    out.set(x, y, z, 0);
                }
            }
        }
    }
    out
}

/// Applies a dataset's protocol to the neutral mask of a structure:
/// margin, then removal of substructures, then axial crop.
pub fn apply_protocol(full: &Grid3<u8>, substructures: &[&Grid3<u8>], variant: &ProtocolVariant) -> Grid3<u8> {
    let mut m = full.clone();
    for _ in 0..variant.margin_voxels.unsigned_abs() {
        m = if variant.margin_voxels > 0 {
            dilate6(&m)
        } else {
            erode6(&m)
        };
    }
    if !variant.include_substructures {
        for sub in substructures {
            for (v, &s) in m.data_mut().iter_mut().zip(sub.data()) {
                if s != 0 {
                    *v = 0;
                }
            }
        }
    }
    if let Some((lo, hi)) = variant.axial_crop {
        let [nx, ny, nz] = m.shape();
        for z in 0..nz {
            let f = (z as f64 + 0.5) / nz as f64;
            if f < lo || f >= hi {
                for y in 0..ny {
                    for x in 0..nx {
                        m.set(x, y, z, 0);
                    }
                }
            }
        }
    }
    m
}

/// Indices of every structure nested (transitively) inside `root`.
pub fn descendants(structures: &[StructureSpec], root: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut frontier = vec![root.to_string()];
    while let Some(p) = frontier.pop() {
        for (i, s) in structures.iter().enumerate() {
            if s.parent.as_deref() == Some(p.as_str()) && !out.contains(&i) {
                out.push(i);
                frontier.push(s.id.clone());
            }
        }
    }
    out.sort_unstable();
    out
}

/// Structures with the per-case jitter applied.
pub fn jittered(config: &GenConfig, rng: &mut StreamRng) -> Vec<StructureSpec> {
    config
        .structures
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for a in 0..3 {
                if config.position_jitter > 0.0 {
                    s.center[a] += rng.random_range(-config.position_jitter..=config.position_jitter);
                }
                if config.size_jitter > 0.0 {
                    s.size[a] *= 1.0 + rng.random_range(-config.size_jitter..=config.size_jitter);
                }
            }
            s
        })
        .collect()
}

/// One rendered case of the collection: normalized image, neutral truth and
/// the dataset's protocol masks.
#[derive(Clone, Debug)]
pub struct GeneratedCase {
    pub dataset: usize,
    pub local_index: usize,
    pub held_out: bool,
    pub image: Grid3<f32>,
    pub truth: Vec<Grid3<u8>>,
    pub masks: Vec<Grid3<u8>>,
}

pub fn is_held_out(local_index: usize, case_count: usize, train_fraction: f64) -> bool {
    let train = (train_fraction * case_count as f64 + 1e-9).floor() as usize;
    local_index >= train.min(case_count)
}

/// Mask an annotation would carry, given the neutral truth of every
/// structure (in config order).
pub fn annotate(config: &GenConfig, truth: &[Grid3<u8>], annotation: &AnnotationSpec) -> Result<Grid3<u8>> {
    let k = config
        .structures
        .iter()
        .position(|s| s.id == annotation.structure)
        .ok_or_else(|| Error::Config(format!("unknown structure {}", annotation.structure)))?;
    if truth.len() != config.structures.len() {
        return Err(Error::Shape(format!(
            "{} truth masks for {} structures",
            truth.len(),
            config.structures.len()
        )));
    }
    let subs: Vec<&Grid3<u8>> = descendants(&config.structures, &annotation.structure)
        .into_iter()
        .map(|i| &truth[i])
        .collect();
    Ok(apply_protocol(&truth[k], &subs, &annotation.protocol))
}

/// Renders case `global_index` (counted across datasets in config order).
/// Depends only on the seed and the index, so cases can be generated in any
/// order.
pub fn generate_case(config: &GenConfig, global_index: usize) -> Result<GeneratedCase> {
    let (mut dataset, mut local) = (0, global_index);
    while dataset < config.datasets.len() && local >= config.datasets[dataset].case_count {
        local -= config.datasets[dataset].case_count;
        dataset += 1;
    }
    let spec = config
        .datasets
        .get(dataset)
        .ok_or_else(|| Error::Config(format!("case {global_index} beyond the configured case counts")))?;
    let mut rng = stream(config.seed, Stream::Generator, &[global_index as u64]);
    let structures = jittered(config, &mut rng);
    let Scene { mut image, truth } = generate_scene(&mut rng, &structures, config.volume_shape, config.noise_std)?;
    zscore(&mut image);
    let masks = spec
        .annotations
        .iter()
        .map(|a| annotate(config, &truth, a))
        .collect::<Result<_>>()?;
    Ok(GeneratedCase {
        dataset,
        local_index: local,
        held_out: is_held_out(
            local,
            spec.case_count,
            spec.train_fraction.unwrap_or(config.train_fraction),
        ),
        image,
        truth,
        masks,
    })
}

/// Writes every case plus `manifest.json` under `out_dir` and returns the
/// loaded manifest. Dataset ids are 1-based in config order.
pub fn generate_collection(config: &GenConfig, out_dir: impl AsRef<Path>) -> Result<CollectionManifest> {
    config.validate()?;
    let out = out_dir.as_ref();
    for sub in ["volumes", "truth"] {
        let p = out.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let total: usize = config.datasets.iter().map(|d| d.case_count).sum();
    let mut cases = Vec::with_capacity(total);
    for g in 0..total {
        let case = generate_case(config, g)?;
        let ds = &config.datasets[case.dataset];
        let stem = format!("{}_{:03}", slug(&ds.name), case.local_index);
        let image = format!("volumes/{stem}_image.mtvol");
        write_volume(&Volume::f32(case.image, config.spacing), out.join(&image))?;
        let mut masks = Vec::new();
        for (j, m) in case.masks.into_iter().enumerate() {
            let p = format!("volumes/{stem}_class{j}.mtvol");
            write_volume(&Volume::u8(m, config.spacing), out.join(&p))?;
            masks.push(p);
        }
        let mut truth = Vec::new();
        for (s, m) in config.structures.iter().zip(case.truth) {
            let p = format!("truth/{stem}_{}.mtvol", slug(&s.id));
            write_volume(&Volume::u8(m, config.spacing), out.join(&p))?;
            truth.push(p);
        }
        cases.push(ManifestCase {
            id: Some(stem),
            dataset_id: case.dataset as u32 + 1,
            image,
            masks,
            held_out: case.held_out,
            truth,
        });
    }
    let file = ManifestFile {
        structures: config.structures.iter().map(|s| s.id.clone()).collect(),
        datasets: config
            .datasets
            .iter()
            .enumerate()
            .map(|(i, d)| ManifestDataset {
                id: i as u32 + 1,
                name: d.name.clone(),
                classes: d
                    .annotations
                    .iter()
                    .map(|a| ManifestClass {
                        name: a.name.clone().unwrap_or_else(|| a.structure.clone()),
                        group_tags: a.tags.clone(),
                        structure: Some(a.structure.clone()),
                    })
                    .collect(),
                spacing: config.spacing,
            })
            .collect(),
        cases,
    };
    let text = serde_json::to_string_pretty(&file).map_err(|source| Error::Json {
        path: out.join("manifest.json"),
        source,
    })?;
    let path = out.join("manifest.json");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    CollectionManifest::from_file(file, out)
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '_'
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sphere(id: &str, center: f64, size: f64) -> StructureSpec {
        StructureSpec {
            id: id.into(),
            shape: ShapeKind::Sphere,
            center: [center; 3],
            size: [size; 3],
            intensity_mean: 1.0,
            intensity_std: 0.0,
            parent: None,
        }
    }

    fn cube(n: usize, lo: usize, side: usize) -> Grid3<u8> {
        let mut g = Grid3::zeros([n; 3]);
        for z in lo..lo + side {
            for y in lo..lo + side {
                for x in lo..lo + side {
                    g.set(x, y, z, 1);
                }
            }
        }
        g
    }

    // Brute-force morphology on coordinates, independent of the grid helpers.
    fn oracle_dilate(m: &Grid3<u8>) -> Grid3<u8> {
        let [nx, ny, nz] = m.shape();
        let mut out = Grid3::zeros(m.shape());
        for z in 0..nz as i64 {
            for y in 0..ny as i64 {
                for x in 0..nx as i64 {
                    let mut on = false;
                    for (a, b, c) in [
                        (0, 0, 0),
                        (1, 0, 0),
                        (-1, 0, 0),
                        (0, 1, 0),
                        (0, -1, 0),
                        (0, 0, 1),
                        (0, 0, -1),
                    ] {
                        let (p, q, r) = (x + a, y + b, z + c);
                        if p >= 0 && q >= 0 && r >= 0 && p < nx as i64 && q < ny as i64 && r < nz as i64 {
                            on |= m.get(p as usize, q as usize, r as usize) == 1;
                        }
                    }
                    out.set(x as usize, y as usize, z as usize, u8::from(on));
                }
            }
        }
        out
    }

    fn oracle_erode(m: &Grid3<u8>) -> Grid3<u8> {
        // erosion is the complement of the dilated complement, with the
        // outside treated as background (so the border always erodes)
        let [nx, ny, nz] = m.shape();
        let mut padded = Grid3::zeros([nx + 2, ny + 2, nz + 2]);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    padded.set(x + 1, y + 1, z + 1, 1 - m.get(x, y, z));
                }
            }
        }
        for z in 0..nz + 2 {
            for y in 0..ny + 2 {
                for x in 0..nx + 2 {
                    if x == 0 || y == 0 || z == 0 || x == nx + 1 || y == ny + 1 || z == nz + 1 {
                        padded.set(x, y, z, 1);
                    }
                }
            }
        }
        let d = oracle_dilate(&padded);
        let mut out = Grid3::zeros(m.shape());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    out.set(x, y, z, 1 - d.get(x + 1, y + 1, z + 1));
                }
            }
        }
        out
    }

    #[test]
    fn centered_sphere_matches_ball_count() {
        let mut rng = stream(1, Stream::Generator, &[0]);
        let scene = generate_scene(&mut rng, &[sphere("s", 0.5, 0.25)], [16; 3], 0.0).unwrap();
        // center 7.5, radius 4
        let mut expected = 0;
        for z in 0..16 {
            for y in 0..16 {
                for x in 0..16 {
                    let d2: f64 = [x, y, z].iter().map(|&v| (v as f64 - 7.5).powi(2)).sum();
                    if d2 <= 16.0 {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(scene.truth[0].count_ones(), expected);
        assert_eq!(expected, 280);
        // intensity field equals the mask when there is no noise or texture
        for (i, m) in scene.image.data().iter().zip(scene.truth[0].data()) {
            assert_eq!(*i, f32::from(*m));
        }
    }

    #[test]
    fn empty_scene_is_zero() {
        let mut rng = stream(1, Stream::Generator, &[0]);
        let scene = generate_scene(&mut rng, &[], [8, 9, 10], 0.0).unwrap();
        assert!(scene.image.data().iter().all(|&v| v == 0.0));
        let mut img = scene.image.clone();
        zscore(&mut img);
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scene_is_deterministic() {
        let cfg = GenConfig::desk();
        let a = generate_case(&cfg, 5).unwrap();
        let b = generate_case(&cfg, 5).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.masks, b.masks);
        let c = generate_case(&cfg, 6).unwrap();
        assert_ne!(a.image.data(), c.image.data());
    }

    #[test]
    fn noise_is_clipped() {
        let mut rng = stream(3, Stream::Generator, &[0]);
        let scene = generate_scene(&mut rng, &[], [8; 3], 0.5).unwrap();
        assert!(scene.image.data().iter().all(|&v| v.abs() <= 1.5 + 1e-6));
        assert!(scene.image.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn structure_outside_volume_is_rejected() {
        let mut rng = stream(1, Stream::Generator, &[0]);
        let err = generate_scene(&mut rng, &[sphere("s", 0.9, 0.25)], [16; 3], 0.0).unwrap_err();
        assert!(err.to_string().contains("exceeds the volume"));
    }

    #[test]
    fn neutral_protocol_is_identity() {
        let m = cube(9, 3, 3);
        assert_eq!(apply_protocol(&m, &[], &ProtocolVariant::neutral()), m);
    }

    #[test]
    fn cube_dilation_count() {
        let m = cube(9, 3, 3);
        let p = ProtocolVariant {
            margin_voxels: 1,
            ..ProtocolVariant::neutral()
        };
        let d = apply_protocol(&m, &[], &p);
        assert_eq!(d, oracle_dilate(&m));
        assert_eq!(d.count_ones(), 27 + 6 * 9);
        let p2 = ProtocolVariant { margin_voxels: 2, ..p };
        assert_eq!(apply_protocol(&m, &[], &p2), oracle_dilate(&oracle_dilate(&m)));
    }

    #[test]
    fn erosion_matches_oracle() {
        let m = cube(9, 2, 5);
        let e = erode6(&m);
        assert_eq!(e, oracle_erode(&m));
        assert_eq!(e.count_ones(), 27);
        // touching the border erodes from that side
        let full = Grid3::filled([4, 4, 4], 1u8);
        assert_eq!(erode6(&full).count_ones(), 8);
    }

    #[test]
    fn removing_substructures_empties_the_overlap() {
        let cfg = GenConfig::desk();
        let case = generate_case(&cfg, 24).unwrap(); // first case of the second dataset
        assert_eq!(case.dataset, 1);
        let lesion = &case.truth[1];
        assert!(lesion.count_ones() > 0);
        let organ = &case.masks[0];
        assert!(organ.data().iter().zip(lesion.data()).all(|(a, b)| a & b == 0));
        // and the neutral organ does contain it
        assert!(case.truth[0].data().iter().zip(lesion.data()).all(|(a, b)| b <= a));
    }

    #[test]
    fn opposite_margins_differ_on_a_shell() {
        let mut rng = stream(2, Stream::Generator, &[0]);
        let scene = generate_scene(&mut rng, &[sphere("s", 0.5, 0.3)], [16; 3], 0.0).unwrap();
        let t = &scene.truth[0];
        let inner = apply_protocol(
            t,
            &[],
            &ProtocolVariant {
                margin_voxels: -1,
                ..ProtocolVariant::neutral()
            },
        );
        let outer = apply_protocol(
            t,
            &[],
            &ProtocolVariant {
                margin_voxels: 1,
                ..ProtocolVariant::neutral()
            },
        );
        let diff: Vec<usize> = (0..t.len()).filter(|&i| inner.data()[i] != outer.data()[i]).collect();
        assert!(!diff.is_empty());
        assert_eq!(diff.len(), oracle_dilate(t).count_ones() - oracle_erode(t).count_ones());
        // every differing voxel is in the outer mask only
        assert!(diff.iter().all(|&i| outer.data()[i] == 1 && inner.data()[i] == 0));
    }

    #[test]
    fn axial_crop_keeps_upper_half() {
        let m = Grid3::filled([8, 8, 8], 1u8);
        let p = ProtocolVariant {
            axial_crop: Some((0.5, 1.0)),
            ..ProtocolVariant::neutral()
        };
        let c = apply_protocol(&m, &[], &p);
        for z in 0..8 {
            let on = (0..64).filter(|&i| c.get(i % 8, i / 8, z) == 1).count();
            assert_eq!(on, if z < 4 { 0 } else { 64 });
        }
    }

    #[test]
    fn protocol_validation() {
        assert!(ProtocolVariant {
            margin_voxels: 4,
            ..ProtocolVariant::neutral()
        }
        .validate()
        .is_err());
        assert!(ProtocolVariant {
            axial_crop: Some((0.6, 0.5)),
            ..ProtocolVariant::neutral()
        }
        .validate()
        .is_err());
        assert!(ProtocolVariant {
            axial_crop: Some((0.0, 1.0)),
            ..ProtocolVariant::neutral()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn held_out_split() {
        let held: Vec<bool> = (0..24).map(|i| is_held_out(i, 24, 0.8)).collect();
        assert_eq!(held.iter().filter(|&&h| h).count(), 5);
        assert!(!held[18] && held[19]);
        assert_eq!((0..8).filter(|&i| is_held_out(i, 8, 0.8)).count(), 2);
        assert_eq!((0..40).filter(|&i| is_held_out(i, 40, 0.8)).count(), 8);
        assert!(!is_held_out(0, 1, 0.8) || !is_held_out(0, 1, 1.0));
    }

    #[test]
    fn desk_config_is_valid_and_round_trips() {
        let cfg = GenConfig::desk();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: GenConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(descendants(&cfg.structures, "organ"), vec![1]);
        assert!(descendants(&cfg.structures, "vessel").is_empty());
    }

    #[test]
    fn same_dataset_masks_overlap_only_when_nested() {
        let cfg = GenConfig::desk();
        for g in [0, 25, 40] {
            let case = generate_case(&cfg, g).unwrap();
            let ds = &cfg.datasets[case.dataset];
            for (i, a) in ds.annotations.iter().enumerate() {
                for (j, b) in ds.annotations.iter().enumerate().skip(i + 1) {
                    let overlap = case.masks[i]
                        .data()
                        .iter()
                        .zip(case.masks[j].data())
                        .any(|(p, q)| p & q == 1);
                    let nested = cfg.structure(&b.structure).unwrap().parent.as_deref() == Some(a.structure.as_str())
                        && a.protocol.include_substructures;
                    assert!(
                        !overlap || nested,
                        "{} / {} overlap in case {g}",
                        a.structure,
                        b.structure
                    );
                }
            }
        }
    }

    #[test]
    fn collection_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = GenConfig::desk();
        cfg.volume_shape = [16, 16, 16];
        for (d, n) in cfg.datasets.iter_mut().zip([3, 2, 4]) {
            d.case_count = n;
        }
        let m = generate_collection(&cfg, dir.path()).unwrap();
        assert_eq!(m.datasets.len(), 3);
        assert_eq!(m.num_classes(), 7);
        assert_eq!(m.cases.len(), 9);
        assert_eq!(m.structures, vec!["organ", "lesion", "vessel", "nodule"]);
        let loaded = crate::collection::load_manifest(dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded, m);
        let case = m.load_case(0).unwrap();
        assert_eq!(case.masks.len(), 2);
        let direct = generate_case(&cfg, 0).unwrap();
        assert_eq!(case.image.data(), direct.image.data());
        assert_eq!(m.load_truth(0, "lesion").unwrap(), direct.truth[1]);
        // z-scored
        let mean: f64 = case.image.data().iter().map(|&v| f64::from(v)).sum::<f64>() / case.image.len() as f64;
        assert!(mean.abs() < 1e-4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn opening_is_anti_extensive(bits in proptest::collection::vec(any::<bool>(), 6 * 7 * 5), steps in 1i32..=3) {
            let m = Grid3::from_vec([6, 7, 5], bits.iter().map(|&b| u8::from(b)).collect()).unwrap();
            let eroded = apply_protocol(&m, &[], &ProtocolVariant { margin_voxels: -steps, ..ProtocolVariant::neutral() });
            let opened = apply_protocol(&eroded, &[], &ProtocolVariant { margin_voxels: steps, ..ProtocolVariant::neutral() });
            prop_assert!(opened.data().iter().zip(m.data()).all(|(o, v)| o <= v));
            prop_assert_eq!(dilate6(&m), oracle_dilate(&m));
            prop_assert_eq!(erode6(&m), oracle_erode(&m));
        }
    }
}
