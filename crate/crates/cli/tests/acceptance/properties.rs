//! Criteria that hold exactly or to tight numerical tolerances.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use anyhow::{ensure, Result};
use partseg::collection::{CollectionManifest, ManifestCase, ManifestClass, ManifestDataset, ManifestFile, Split};
use partseg::eval::paired_one_sided_t_test;
use partseg::losses::{batch_dice, partial_label_loss, BceNormalization, LossBatch, LossOptions};
use partseg::ndnet::gradcheck::{run_suite, GradcheckOptions};
use partseg::ndnet::{build_unet, ParamRole, Tensor};
use partseg::phantom::{generate_collection, GenConfig};
use partseg::sampling::{build_sampler, extract_patch, learning_rate, sample_batch, ScheduleSpec};
use partseg::trainer::{train_step, Batch, Sgd, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

pub fn gradients() -> Result<Outcome> {
    let start = Instant::now();
    let opts = GradcheckOptions::default();
    let report = run_suite(&opts)?;
    let seconds = start.elapsed().as_secs_f64();
    let worst = report
        .results
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("suite is not empty");
    let loose: Vec<&str> = report
        .results
        .iter()
        .filter(|r| r.tolerance > 1e-5)
        .map(|r| r.kind.as_str())
        .collect();
    let failing: Vec<&str> = report
        .results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.kind.as_str())
        .collect();
    let composed = report.results.iter().any(|r| r.kind.starts_with("network+"));
    let passed = failing.is_empty() && loose.is_empty() && composed && seconds < 300.0;
    Ok(Outcome::new(
        passed,
        format!(
            "{} kinds, worst {} at {:.2e}, failing {:?}, tolerance above 1e-5 {:?}, {:.0}s",
            report.results.len(),
            worst.kind,
            worst.max_rel_error,
            failing,
            loose,
            seconds
        ),
    ))
}

fn random_batch(
    rng: &mut ChaCha8Rng,
    b: usize,
    c: usize,
    spatial: [usize; 3],
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let n: usize = spatial.iter().product();
    let shape = [b, c, spatial[0], spatial[1], spatial[2]];
    let annotation: Vec<f64> = (0..b * c).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    let mut targets = vec![0.0; b * c * n];
    for (pair, &m) in annotation.iter().enumerate() {
        if m == 1.0 {
            for v in &mut targets[pair * n..(pair + 1) * n] {
                *v = f64::from(u8::from(rng.random_bool(0.3)));
            }
        }
    }
    let logits = (0..b * c * n).map(|_| rng.random_range(-3.0..3.0)).collect();
    (
        Tensor::from_vec(&shape, logits).unwrap(),
        Tensor::from_vec(&shape, targets).unwrap(),
        Tensor::from_vec(&[b, c], annotation).unwrap(),
    )
}

pub fn masking() -> Result<Outcome> {
    let mut unannotated = 0usize;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, c) = (rng.random_range(1..=3), rng.random_range(1..=4));
        let spatial = [
            rng.random_range(1..=4),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        ];
        let n: usize = spatial.iter().product();
        let (logits, targets, annotation) = random_batch(&mut rng, b, c, spatial);
        let v = partial_label_loss(
            &LossBatch {
                logits: &logits,
                targets: &targets,
                annotation: &annotation,
            },
            &LossOptions::default(),
        )?;
        for pair in 0..b * c {
            if annotation.data()[pair] == 0.0 {
                unannotated += 1;
                let g = &v.voxel_gradient.data()[pair * n..(pair + 1) * n];
                ensure!(
                    g.iter().all(|&x| x == 0.0),
                    "seed {seed}: gradient leaks into unannotated pair {pair}"
                );
            }
        }
    }

    // Real optimizer steps on batches drawn from a single dataset.
    let dir = tempfile::tempdir()?;
    let mut gen = GenConfig::desk();
    gen.volume_shape = [16, 16, 16];
    for d in &mut gen.datasets {
        d.case_count = 4;
    }
    let manifest = generate_collection(&gen, dir.path())?;
    let mut config = TrainConfig::desk();
    config.net.base_channels = 4;
    config.net.patch_shape = [16, 16, 16];
    config.net.num_global_classes = manifest.num_classes();
    let mut heads_checked = 0;
    for ds in &manifest.datasets {
        let mut net = build_unet::<f32>(&config.net, 3)?;
        let before = net.clone();
        let mut opt = Sgd::new(&net, config.momentum, config.nesterov);
        let own = manifest.class_offset(ds.dataset_id)?..manifest.class_offset(ds.dataset_id)? + ds.classes.len();
        let cases: Vec<usize> = manifest
            .case_indices(Split::Train)
            .into_iter()
            .filter(|&i| manifest.cases[i].dataset_id == ds.dataset_id)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from(ds.dataset_id));
        for step in 0..3 {
            let picked = vec![cases[step % cases.len()], cases[(step + 1) % cases.len()]];
            let patches = picked
                .iter()
                .map(|&i| {
                    extract_patch(
                        &manifest.load_case(i)?,
                        &manifest,
                        config.net.patch_shape,
                        1.0,
                        &mut rng,
                    )
                })
                .collect::<partseg::Result<Vec<_>>>()?;
            let batch = Batch::assemble(step, picked, &patches, config.net.patch_shape, manifest.num_classes())?;
            train_step(&mut net, &mut opt, batch, &config, &manifest, 0.01, 0.01)?;
        }
        for (i, (p, q)) in net.params.iter().zip(&before.params).enumerate() {
            if let ParamRole::Head(c) = p.role {
                let same = p
                    .value
                    .data()
                    .iter()
                    .zip(q.value.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if own.contains(&c) {
                    ensure!(!same, "dataset {}: own head {} did not move", ds.dataset_id, p.name);
                } else {
                    ensure!(same, "dataset {}: foreign head {} changed", ds.dataset_id, p.name);
                    ensure!(
                        opt.buffer(i).iter().all(|&m| m == 0.0),
                        "dataset {}: momentum on {}",
                        ds.dataset_id,
                        p.name
                    );
                    heads_checked += 1;
                }
            }
        }
    }
    Ok(Outcome::new(
        true,
        format!("{unannotated} unannotated pairs over 100 seeds with zero gradient, {heads_checked} foreign head tensors bit-unchanged after dataset-only steps"),
    ))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Direct evaluation, one class at a time, then sample, then voxel.
fn brute_force(
    logits: &Tensor<f64>,
    targets: &Tensor<f64>,
    annotation: &Tensor<f64>,
    eps: f64,
) -> (f64, Vec<(f64, f64)>) {
    let (b, c) = (annotation.shape()[0], annotation.shape()[1]);
    let n = logits.numel() / (b * c);
    let mut total = 0.0;
    let mut terms = Vec::new();
    for k in 0..c {
        let mut bce = 0.0;
        let mut annotated = 0;
        let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
        for s in 0..b {
            if annotation.data()[s * c + k] == 0.0 {
                continue;
            }
            annotated += 1;
            for i in 0..n {
                let at = (s * c + k) * n + i;
                let p = sigmoid(logits.data()[at]);
                let y = targets.data()[at];
                bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                inter += p * y;
                psum += p;
                ysum += y;
            }
        }
        let bce = if annotated == 0 {
            0.0
        } else {
            bce / (n * annotated) as f64
        };
        let denom = psum + ysum + eps;
        let dice = if annotated == 0 || denom == 0.0 {
            0.0
        } else {
            2.0 * inter / denom
        };
        total += bce - dice;
        terms.push((bce, dice));
    }
    (total, terms)
}

pub fn loss_oracle() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for b in 1..=2 {
        for c in 1..=3 {
            for seed in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * seed + 10 * b as u64 + c as u64);
                let spatial = [rng.random_range(1..=4), rng.random_range(1..=4), 4];
                let (logits, mut targets, annotation) = random_batch(&mut rng, b, c, spatial);
                let n: usize = spatial.iter().product();
                for eps_on in [true, false] {
                    if !eps_on {
                        // the unsmoothed form is only defined on nonempty classes
                        for pair in 0..b * c {
                            if annotation.data()[pair] == 1.0 {
                                targets.data_mut()[pair * n] = 1.0;
                            }
                        }
                    }
                    let opts = LossOptions {
                        dice_eps: if eps_on { 1e-5 } else { 0.0 },
                        bce_norm: BceNormalization::PerAnnotatedSample,
                    };
                    let v = partial_label_loss(
                        &LossBatch {
                            logits: &logits,
                            targets: &targets,
                            annotation: &annotation,
                        },
                        &opts,
                    )?;
                    let (total, terms) = brute_force(&logits, &targets, &annotation, opts.dice_eps);
                    worst = worst.max((v.total - total).abs());
                    for (got, (bce, dice)) in v.per_class.iter().zip(&terms) {
                        worst = worst.max((got.bce - bce).abs()).max((got.dice - dice).abs());
                    }
                    cases += 1;
                }
            }
        }
    }
    Ok(Outcome::new(
        worst <= 1e-12,
        format!("{cases} batches up to (2,3,4^3), max abs difference {worst:.2e} (limit 1e-12)"),
    ))
}

pub fn batch_dice_pooling() -> Result<Outcome> {
    // sample 0: 100-voxel object segmented perfectly; sample 1: 3-voxel
    // object missed entirely
    let n = 216;
    let mut target = vec![0.0; 2 * n];
    target[..100].fill(1.0);
    target[n..n + 3].fill(1.0);
    let mut miss = target.clone();
    miss[n..n + 3].fill(0.0);
    let eps = 1e-5;
    let shape = [2, 1, 6, 6, 6];
    let t = Tensor::from_vec(&shape, target.clone())?;
    let ann = Tensor::from_vec(&[2, 1], vec![1.0, 1.0])?;
    let pooled = |probs: &[f64]| -> Result<f64> {
        Ok(batch_dice(&Tensor::from_vec(&shape, probs.to_vec())?, &t, &ann, eps)?.0[0])
    };
    let per_image = |probs: &[f64]| -> Result<f64> {
        let mut sum = 0.0;
        for s in 0..2 {
            let p = Tensor::from_vec(&[1, 1, 6, 6, 6], probs[s * n..(s + 1) * n].to_vec())?;
            let y = Tensor::from_vec(&[1, 1, 6, 6, 6], target[s * n..(s + 1) * n].to_vec())?;
            let a = Tensor::from_vec(&[1, 1], vec![1.0])?;
            sum += batch_dice(&p, &y, &a, eps)?.0[0];
        }
        Ok(sum / 2.0)
    };
    let pooled_penalty = pooled(&target)? - pooled(&miss)?;
    let image_penalty = per_image(&target)? - per_image(&miss)?;
    let hand = 206.0 / (206.0 + eps) - 200.0 / (203.0 + eps);
    ensure!(
        (pooled_penalty - hand).abs() < 1e-12,
        "pooled penalty {pooled_penalty} vs hand value {hand}"
    );
    Ok(Outcome::new(
        pooled_penalty < image_penalty,
        format!("dice loss penalty for the 3-voxel miss: pooled {pooled_penalty:.4}, per-image {image_penalty:.4}"),
    ))
}

fn sized_manifest(sizes: &[(u32, usize)]) -> Result<CollectionManifest> {
    let file = ManifestFile {
        structures: vec![],
        datasets: sizes
            .iter()
            .map(|&(id, _)| ManifestDataset {
                id,
                name: format!("d{id}"),
                classes: vec![ManifestClass {
                    name: "c".into(),
                    group_tags: vec![],
                    structure: None,
                }],
                spacing: [1.0; 3],
            })
            .collect(),
        cases: sizes
            .iter()
            .flat_map(|&(id, n)| {
                (0..n).map(move |i| ManifestCase {
                    id: None,
                    dataset_id: id,
                    image: format!("{id}_{i}"),
                    masks: vec![format!("{id}_{i}_m")],
                    held_out: false,
                    truth: vec![],
                })
            })
            .collect(),
    };
    Ok(CollectionManifest::from_file(file, Path::new("/"))?)
}

pub fn sampler() -> Result<Outcome> {
    let sizes = [(1u32, 131usize), (2, 30), (3, 210)];
    let manifest = sized_manifest(&sizes)?;
    let s = build_sampler(&manifest)?;
    let norm: f64 = sizes.iter().map(|&(_, n)| (n as f64).sqrt()).sum();
    let mut exact = true;
    for &(id, n) in &sizes {
        exact &= s.dataset_probs[&id] == (n as f64).sqrt() / norm;
    }
    let quoted = [0.3643, 0.1743, 0.4613];
    let near_quoted = sizes
        .iter()
        .zip(quoted)
        .all(|(&(id, _), q)| (s.dataset_probs[&id] - q).abs() < 1e-4);

    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for i in sample_batch(&s, draws, &mut rng) {
        *counts.entry(manifest.cases[i].dataset_id).or_default() += 1;
    }
    let worst = sizes
        .iter()
        .map(|&(id, _)| (counts[&id] as f64 / draws as f64 - s.dataset_probs[&id]).abs())
        .fold(0.0, f64::max);
    let probs: Vec<String> = sizes
        .iter()
        .map(|(id, _)| format!("{:.4}", s.dataset_probs[id]))
        .collect();
    Ok(Outcome::new(
        exact && near_quoted && worst <= 0.01,
        format!(
            "p = [{}], exact {exact}, empirical max deviation {worst:.4} over {draws} draws",
            probs.join(", ")
        ),
    ))
}

pub fn schedule() -> Result<Outcome> {
    let ft = ScheduleSpec::finetune(0.01, 1000);
    let lr = |e: usize, role: ParamRole| learning_rate(&ft, e, role);
    let head = ParamRole::Head(0);
    let back = ParamRole::Backbone;
    let mut checks = Vec::new();
    checks.push((
        "backbone frozen 0-9",
        (0..10)
            .map(|e| lr(e, back))
            .collect::<partseg::Result<Vec<_>>>()?
            .iter()
            .all(|&v| v == 0.0),
    ));
    checks.push((
        "heads warm up 0-9",
        lr(0, head)? > 0.0 && lr(9, head)? == 0.01 && lr(4, head)? < lr(5, head)?,
    ));
    checks.push((
        "backbone live at 10",
        lr(10, back)? > 0.0 && lr(10, back)? == lr(10, head)?,
    ));
    let ramp = (10..60).map(|e| lr(e, back)).collect::<partseg::Result<Vec<_>>>()?;
    checks.push((
        "ramp increases to base by 59",
        ramp.windows(2).all(|w| w[0] < w[1]) && ramp[49] == 0.01 && ramp[48] < 0.01,
    ));
    let tail = (60..1000).map(|e| lr(e, back)).collect::<partseg::Result<Vec<_>>>()?;
    checks.push((
        "poly from 60",
        tail[0] == 0.01 && tail.windows(2).all(|w| w[0] > w[1]) && tail[939] > 0.0,
    ));
    let mid = learning_rate(&ScheduleSpec::standard(0.01, 1000), 500, back)?;
    let expect = 0.01 * 0.5f64.powf(0.9);
    checks.push((
        "standard mid value",
        (mid - expect).abs() < 1e-15 && (mid - 0.005359).abs() < 5e-7,
    ));
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    Ok(Outcome::new(
        failed.is_empty(),
        format!(
            "{} phase checks, failing {failed:?}; standard lr at epoch 500/1000 = {mid:.6}",
            checks.len()
        ),
    ))
}

/// CDF of Student's t with three degrees of freedom in closed form.
fn t3_cdf(t: f64) -> f64 {
    let r3 = 3f64.sqrt();
    0.5 + (t / (r3 * (1.0 + t * t / 3.0)) + (t / r3).atan()) / std::f64::consts::PI
}

pub fn t_test() -> Result<Outcome> {
    let a = [1.0, -1.0, 1.0, 1.0];
    let b = [0.0; 4];
    let p = paired_one_sided_t_test(&a, &b)?;
    // mean 0.5, sample sd 1, so t = 1 on 3 degrees of freedom
    let oracle = 1.0 - t3_cdf(1.0);
    Ok(Outcome::new(
        (p - oracle).abs() < 1e-3 && (p - 0.1955).abs() < 1e-3,
        format!("p = {p:.6}, closed-form oracle {oracle:.6}"),
    ))
}
