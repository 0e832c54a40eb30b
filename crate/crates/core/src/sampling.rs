//! Case sampling balanced across datasets, patch extraction, and learning
//! rate schedules.
//!
//! A case from a dataset with `n_k` cases is drawn with weight `1/sqrt(n_k)`,
//! so a whole dataset is drawn with probability `sqrt(n_k) / sum_j sqrt(n_j)`.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::collection::{annotation_mask_vector, Case, CollectionManifest, Grid3};
use crate::ndnet::ParamRole;
use crate::{Error, Result};

pub const DEFAULT_FG_BIAS: f64 = 0.33;

/// Immutable case distribution over the cases of a manifest.
#[derive(Clone, Debug)]
pub struct Sampler {
    /// Manifest case index per entry.
    pub cases: Vec<usize>,
    pub case_probs: Vec<f64>,
    pub dataset_probs: BTreeMap<u32, f64>,
    index: WeightedIndex<f64>,
}

pub fn build_sampler(manifest: &CollectionManifest) -> Result<Sampler> {
    if manifest.cases.is_empty() {
        return Err(Error::Manifest("cannot sample from an empty manifest".into()));
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for c in &manifest.cases {
        *counts.entry(c.dataset_id).or_default() += 1;
    }
    let norm: f64 = counts.values().map(|&n| (n as f64).sqrt()).sum();
    let case_probs: Vec<f64> = manifest
        .cases
        .iter()
        .map(|c| 1.0 / (counts[&c.dataset_id] as f64).sqrt() / norm)
        .collect();
    let dataset_probs = counts.iter().map(|(&k, &n)| (k, (n as f64).sqrt() / norm)).collect();
    let index = WeightedIndex::new(&case_probs).map_err(|e| Error::Manifest(format!("sampler weights: {e}")))?;
    Ok(Sampler {
        cases: (0..manifest.cases.len()).collect(),
        case_probs,
        dataset_probs,
        index,
    })
}

impl Sampler {
    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        self.cases[self.index.sample(rng)]
    }
}

/// Independent draws with replacement; returns manifest case indices.
pub fn sample_batch(sampler: &Sampler, batch_size: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..batch_size).map(|_| sampler.draw(rng)).collect()
}

/// One training patch. Spatial data is X-fastest (`[Z, Y, X]` as a tensor).
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub origin: [isize; 3],
    pub image: Vec<f32>,
    /// `[C_global, Z, Y, X]` multi-hot targets; zero outside the case's dataset.
    pub target: Vec<u8>,
    pub annotation: Vec<u8>,
}

/// Voxels that are foreground in any of the case's masks.
pub fn foreground_voxels(case: &Case) -> Vec<usize> {
    let n = case.image.len();
    (0..n)
        .filter(|&i| case.masks.iter().any(|m| m.data()[i] != 0))
        .collect()
}

fn uniform_origin(dim: usize, patch: usize, rng: &mut impl Rng) -> isize {
    if patch >= dim {
        -(((patch - dim) / 2) as isize)
    } else {
        rng.random_range(0..=dim - patch) as isize
    }
}

fn origin_around(voxel: usize, dim: usize, patch: usize) -> isize {
    if patch >= dim {
        return -(((patch - dim) / 2) as isize);
    }
    let start = voxel as isize - (patch / 2) as isize;
    start.clamp(0, (dim - patch) as isize)
}

/// Picks a patch origin: with probability `fg_bias` the patch is placed
/// around a uniformly chosen foreground voxel, otherwise uniformly.
pub fn choose_origin(
    shape: [usize; 3],
    patch: [usize; 3],
    foreground: &[usize],
    fg_bias: f64,
    rng: &mut impl Rng,
) -> [isize; 3] {
    let forced = rng.random_bool(fg_bias.clamp(0.0, 1.0));
    if forced && !foreground.is_empty() {
        let v = foreground[rng.random_range(0..foreground.len())];
        let (x, y, z) = (v % shape[0], (v / shape[0]) % shape[1], v / (shape[0] * shape[1]));
        [
            origin_around(x, shape[0], patch[0]),
            origin_around(y, shape[1], patch[1]),
            origin_around(z, shape[2], patch[2]),
        ]
    } else {
        [
            uniform_origin(shape[0], patch[0], rng),
            uniform_origin(shape[1], patch[1], rng),
            uniform_origin(shape[2], patch[2], rng),
        ]
    }
}

/// Crops the image and the case's masks at `origin`, embedding the masks on
/// the global class axis. Regions outside the case are edge-replicated.
pub fn crop_patch(case: &Case, manifest: &CollectionManifest, origin: [isize; 3], patch: [usize; 3]) -> Result<Patch> {
    let offset = manifest.class_offset(case.dataset_id)?;
    let classes = manifest.num_classes();
    let annotation = annotation_mask_vector(case.dataset_id, manifest)?;
    let local = manifest.dataset(case.dataset_id).map_or(0, |d| d.classes.len());
    if case.masks.len() != local {
        return Err(Error::Manifest(format!(
            "case {} has {} masks, dataset {} has {local} classes",
            case.id,
            case.masks.len(),
            case.dataset_id
        )));
    }
    let p: usize = patch.iter().product();
    let image = case.image.crop_replicate(origin, patch).into_vec();
    let mut target = vec![0u8; classes * p];
    for (j, m) in case.masks.iter().enumerate() {
        let crop: Grid3<u8> = m.crop_replicate(origin, patch);
        target[(offset + j) * p..(offset + j + 1) * p].copy_from_slice(crop.data());
    }
    Ok(Patch {
        origin,
        image,
        target,
        annotation,
    })
}

pub fn extract_patch(
    case: &Case,
    manifest: &CollectionManifest,
    patch: [usize; 3],
    fg_bias: f64,
    rng: &mut impl Rng,
) -> Result<Patch> {
    let fg = foreground_voxels(case);
    let origin = choose_origin(case.image.shape(), patch, &fg, fg_bias, rng);
    crop_patch(case, manifest, origin, patch)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Polynomial decay for every parameter.
    Standard,
    /// Head-only warmup, then a whole-network warmup, then polynomial decay.
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub mode: ScheduleMode,
    pub base_lr: f64,
    pub total_epochs: usize,
    #[serde(default = "default_head_warmup")]
    pub head_warmup_epochs: usize,
    #[serde(default = "default_full_warmup")]
    pub full_warmup_epochs: usize,
    #[serde(default = "default_poly")]
    pub poly_exponent: f64,
}

fn default_head_warmup() -> usize {
    10
}

fn default_full_warmup() -> usize {
    50
}

fn default_poly() -> f64 {
    0.9
}

impl ScheduleSpec {
    pub fn standard(base_lr: f64, total_epochs: usize) -> Self {
        ScheduleSpec {
            mode: ScheduleMode::Standard,
            base_lr,
            total_epochs,
            head_warmup_epochs: default_head_warmup(),
            full_warmup_epochs: default_full_warmup(),
            poly_exponent: default_poly(),
        }
    }

    pub fn finetune(base_lr: f64, total_epochs: usize) -> Self {
        ScheduleSpec {
            mode: ScheduleMode::Finetune,
            ..Self::standard(base_lr, total_epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base lr {} must be finite and >= 0",
                self.base_lr
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        if self.mode == ScheduleMode::Finetune && self.head_warmup_epochs + self.full_warmup_epochs >= self.total_epochs
        {
            return Err(Error::Config(format!(
                "warmup epochs {} + {} must be fewer than total epochs {}",
                self.head_warmup_epochs, self.full_warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }

    fn poly(&self, done: usize, span: usize) -> f64 {
        self.base_lr * (1.0 - done as f64 / span as f64).powf(self.poly_exponent)
    }
}

pub fn learning_rate(spec: &ScheduleSpec, epoch: usize, role: ParamRole) -> Result<f64> {
    spec.validate()?;
    if epoch >= spec.total_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside [0, {})",
            spec.total_epochs
        )));
    }
    let lr = match spec.mode {
        ScheduleMode::Standard => spec.poly(epoch, spec.total_epochs),
        ScheduleMode::Finetune => {
            let h = spec.head_warmup_epochs;
            let w = h + spec.full_warmup_epochs;
            if epoch < h {
                if role.is_head() {
                    spec.base_lr * (epoch + 1) as f64 / h as f64
                } else {
                    0.0
                }
            } else if epoch < w {
                (spec.base_lr * (epoch + 1 - h) as f64 / spec.full_warmup_epochs as f64).min(spec.base_lr)
            } else {
                spec.poly(epoch - w, spec.total_epochs - w)
            }
        }
    };
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collection::{ManifestCase, ManifestClass, ManifestDataset, ManifestFile};
    use crate::rng::{stream, Stream};
    use approx::assert_abs_diff_eq;
    use std::path::Path;

    fn manifest(sizes: &[(u32, usize, usize)]) -> CollectionManifest {
        let file = ManifestFile {
            structures: vec![],
            datasets: sizes
                .iter()
                .map(|&(id, classes, _)| ManifestDataset {
                    id,
                    name: format!("D{id}"),
                    classes: (0..classes)
                        .map(|j| ManifestClass {
                            name: format!("c{j}"),
                            group_tags: vec![],
                            structure: None,
                        })
                        .collect(),
                    spacing: [1.0; 3],
                })
                .collect(),
            cases: sizes
                .iter()
                .flat_map(|&(id, classes, n)| {
                    (0..n).map(move |i| ManifestCase {
                        id: None,
                        dataset_id: id,
                        image: format!("{id}_{i}"),
                        masks: (0..classes).map(|j| format!("{id}_{i}_{j}")).collect(),
                        held_out: false,
                        truth: vec![],
                    })
                })
                .collect(),
        };
        CollectionManifest::from_file(file, Path::new("/")).unwrap()
    }

    #[test]
    fn dataset_probabilities_follow_sqrt_n() {
        let m = manifest(&[(1, 1, 131), (7, 1, 30), (13, 1, 210)]);
        let s = build_sampler(&m).unwrap();
        let total = 131f64.sqrt() + 30f64.sqrt() + 210f64.sqrt();
        assert_abs_diff_eq!(total, 31.414, epsilon = 1e-3);
        for (k, n) in [(1, 131.0), (7, 30.0), (13, 210.0)] {
            assert_abs_diff_eq!(s.dataset_probs[&k], f64::sqrt(n) / total, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(s.dataset_probs[&1], 0.3643, epsilon = 1e-4);
        assert_abs_diff_eq!(s.dataset_probs[&7], 0.1743, epsilon = 1e-4);
        assert_abs_diff_eq!(s.dataset_probs[&13], 0.4613, epsilon = 1e-4);
        assert_abs_diff_eq!(s.case_probs.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        // dataset probability is the sum of its case probabilities
        let from_cases: f64 = m
            .cases
            .iter()
            .zip(&s.case_probs)
            .filter(|(c, _)| c.dataset_id == 7)
            .map(|(_, p)| p)
            .sum();
        assert_abs_diff_eq!(from_cases, s.dataset_probs[&7], epsilon = 1e-12);
    }

    #[test]
    fn symmetric_and_single_dataset() {
        let s = build_sampler(&manifest(&[(1, 1, 10), (2, 1, 10)])).unwrap();
        assert_abs_diff_eq!(s.dataset_probs[&1], 0.5, epsilon = 1e-15);
        let s = build_sampler(&manifest(&[(4, 2, 7)])).unwrap();
        assert!(s.case_probs.iter().all(|&p| (p - 1.0 / 7.0).abs() < 1e-15));
    }

    #[test]
    fn empirical_frequencies_and_determinism() {
        let m = manifest(&[(1, 1, 131), (7, 1, 30), (13, 1, 210)]);
        let s = build_sampler(&m).unwrap();
        let mut rng = stream(11, Stream::Batch, &[]);
        let draws = sample_batch(&s, 100_000, &mut rng);
        for (&k, &p) in &s.dataset_probs {
            let f = draws.iter().filter(|&&i| m.cases[i].dataset_id == k).count() as f64 / 1e5;
            assert!((f - p).abs() < 0.01, "dataset {k}: {f} vs {p}");
        }
        let again = sample_batch(&s, 100_000, &mut stream(11, Stream::Batch, &[]));
        assert_eq!(draws, again);
        assert_eq!(sample_batch(&s, 4, &mut rng).len(), 4);
    }

    fn case_with_dot(shape: [usize; 3], dot: [usize; 3], dataset_id: u32, masks: usize) -> Case {
        let mut m = Grid3::zeros(shape);
        m.set(dot[0], dot[1], dot[2], 1);
        let mut all = vec![m];
        all.extend((1..masks).map(|_| Grid3::zeros(shape)));
        let image = Grid3::from_vec(shape, (0..shape.iter().product::<usize>()).map(|i| i as f32).collect()).unwrap();
        Case::new("c".into(), dataset_id, image, all).unwrap()
    }

    #[test]
    fn forced_foreground_contains_the_voxel() {
        let m = manifest(&[(1, 2, 1), (2, 1, 1)]);
        let case = case_with_dot([12, 10, 9], [11, 0, 4], 1, 2);
        let mut rng = stream(5, Stream::Patch, &[]);
        for _ in 0..200 {
            let p = extract_patch(&case, &m, [4, 4, 4], 1.0, &mut rng).unwrap();
            assert_eq!(p.target[..64].iter().filter(|&&v| v == 1).count(), 1);
        }
    }

    #[test]
    fn embedding_on_global_axis() {
        let m = manifest(&[(1, 2, 1), (2, 1, 1)]);
        let case = case_with_dot([6, 6, 6], [2, 2, 2], 1, 2);
        let p = crop_patch(&case, &m, [0, 0, 0], [6, 6, 6]).unwrap();
        assert_eq!(p.annotation, vec![1, 1, 0]);
        assert!(p.target[2 * 216..].iter().all(|&v| v == 0));
        assert_eq!(p.target[..216].iter().filter(|&&v| v == 1).count(), 1);
        // image is cropped X-fastest
        assert_eq!(p.image[1], 1.0);
        assert_eq!(p.image[6], 6.0);

        let case_b = case_with_dot([6, 6, 6], [0, 0, 0], 2, 1);
        let p = crop_patch(&case_b, &m, [0, 0, 0], [6, 6, 6]).unwrap();
        assert_eq!(p.annotation, vec![0, 0, 1]);
        assert!(p.target[..2 * 216].iter().all(|&v| v == 0));
    }

    #[test]
    fn oversized_patch_is_edge_replicated() {
        let m = manifest(&[(1, 1, 1)]);
        let case = case_with_dot([4, 4, 4], [0, 0, 0], 1, 1);
        let mut rng = stream(5, Stream::Patch, &[]);
        let p = extract_patch(&case, &m, [6, 4, 4], 0.0, &mut rng).unwrap();
        assert_eq!(p.origin, [-1, 0, 0]);
        assert_eq!(p.image.len(), 96);
        assert_eq!(p.image[0], 0.0);
        assert_eq!(p.image[1], 0.0);
        assert_eq!(p.image[5], 3.0);
    }

    #[test]
    fn unbiased_origins_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        // 4 valid positions per axis
        let mut rng = stream(9, Stream::Patch, &[]);
        let mut counts = [0usize; 64];
        let draws = 64 * 200;
        for _ in 0..draws {
            let o = choose_origin([7, 7, 7], [4, 4, 4], &[0], 0.0, &mut rng);
            counts[(o[0] + 4 * o[1] + 16 * o[2]) as usize] += 1;
        }
        let e = draws as f64 / 64.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new(63.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 {chi2} p {p}");
    }

    fn lr(spec: &ScheduleSpec, e: usize, head: bool) -> f64 {
        learning_rate(spec, e, if head { ParamRole::Head(0) } else { ParamRole::Backbone }).unwrap()
    }

    #[test]
    fn standard_schedule() {
        let s = ScheduleSpec::standard(0.01, 1000);
        assert_eq!(lr(&s, 0, false), 0.01);
        assert_abs_diff_eq!(lr(&s, 500, true), 0.01 * 0.5f64.powf(0.9), epsilon = 1e-15);
        assert_abs_diff_eq!(lr(&s, 500, false), 0.005359, epsilon = 1e-6);
        assert!(learning_rate(&s, 1000, ParamRole::Backbone).is_err());
    }

    #[test]
    fn finetune_schedule_phases() {
        let s = ScheduleSpec::finetune(0.01, 1000);
        for e in 0..10 {
            assert_eq!(lr(&s, e, false), 0.0);
            assert_abs_diff_eq!(lr(&s, e, true), 0.01 * (e + 1) as f64 / 10.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(lr(&s, 5, true), 0.006, epsilon = 1e-15);
        assert_abs_diff_eq!(lr(&s, 10, false), 0.01 / 50.0, epsilon = 1e-15);
        assert_abs_diff_eq!(lr(&s, 59, false), 0.01, epsilon = 1e-15);
        assert_eq!(lr(&s, 59, true), lr(&s, 59, false));
        assert_abs_diff_eq!(lr(&s, 60, false), 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(
            lr(&s, 500, true),
            0.01 * (1.0 - 440.0 / 940.0f64).powf(0.9),
            epsilon = 1e-15
        );
        let mut prev = f64::INFINITY;
        for e in 60..1000 {
            let v = lr(&s, e, false);
            assert!(v <= prev && v >= 0.0);
            prev = v;
        }
        let mut prev = 0.0;
        for e in 0..60 {
            let v = lr(&s, e, true);
            if e != 10 {
                assert!(v >= prev, "epoch {e}");
            }
            prev = v;
        }
        assert!(ScheduleSpec::finetune(0.01, 60).validate().is_err());
    }
}
