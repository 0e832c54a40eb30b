//! Scaled-down training experiments on phantom collections.

use anyhow::{ensure, Context, Result};
use partseg::collection::{CollectionManifest, Grid3, Split};
use partseg::eval::{dice_score, evaluate};
use partseg::ndnet::decode_checkpoint;
use partseg::phantom::{
    annotate, generate_case, generate_collection, AnnotationSpec, DatasetSpec, GenConfig, ProtocolVariant,
};
use partseg::trainer::{finetune, train, Model, Objective, RunOutput, Segmenter, TrainConfig};

use crate::{median, Outcome};

const SEEDS: [u64; 3] = [1, 2, 3];
const PATCH: [usize; 3] = [16, 16, 16];
const EPOCHS: usize = 20;

/// Desk network and optimizer at a given budget of iterations.
fn budget(seed: u64, iterations: usize, batch: usize) -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.seed = seed;
    c.batch_size = batch;
    c.epochs = EPOCHS;
    c.iterations_per_epoch = iterations / EPOCHS;
    c.net.patch_shape = PATCH;
    c
}

fn count_and(masks: &[&Grid3<u8>]) -> usize {
    (0..masks[0].len())
        .filter(|&i| masks.iter().all(|m| m.data()[i] != 0))
        .count()
}

/// Mean held-out dice over the classes of one dataset.
fn dataset_dice(model: &Model, manifest: &CollectionManifest, dataset: u32) -> Result<f64> {
    let table = evaluate(model, &manifest.select_datasets(&[dataset])?, Split::HeldOut)?;
    let means = table.dataset_means();
    ensure!(means.len() == 1, "expected one dataset in the table");
    Ok(means[0].1)
}

pub fn overlap() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let mut gen = GenConfig::desk();
    gen.seed = 11;
    gen.datasets.truncate(1);
    let manifest = generate_collection(&gen, dir.path())?;
    let fit = |objective| -> Result<Model> {
        let mut c = budget(11, 500, 2);
        c.objective = objective;
        Ok(train(&manifest, &c, &RunOutput::default())?.model())
    };
    let sigmoid = fit(Objective::Sigmoid)?;
    let softmax = fit(Objective::Softmax)?;
    let (mut truth_overlap, mut sigmoid_hits, mut softmax_multi) = (0, 0, 0);
    for i in manifest.case_indices(Split::HeldOut) {
        let case = manifest.load_case(i)?;
        truth_overlap += count_and(&[&case.masks[0], &case.masks[1]]);
        let s = sigmoid.segment(&case.image)?;
        sigmoid_hits += count_and(&[&s[0], &s[1], &case.masks[0], &case.masks[1]]);
        let f = softmax.segment(&case.image)?;
        softmax_multi += count_and(&[&f[0], &f[1]]);
    }
    Ok(Outcome::new(
        truth_overlap > 0 && sigmoid_hits >= 1 && softmax_multi == 0,
        format!(
            "held-out voxels labelled organ and lesion: truth {truth_overlap}, sigmoid hits {sigmoid_hits}, softmax multi-positive {softmax_multi}"
        ),
    ))
}

fn margin_collection(seed: u64) -> GenConfig {
    let mut gen = GenConfig::desk();
    gen.seed = seed;
    let organ = |m: i32| AnnotationSpec {
        structure: "organ".into(),
        name: Some(format!("organ {m:+}")),
        protocol: ProtocolVariant {
            margin_voxels: m,
            ..ProtocolVariant::neutral()
        },
        tags: vec!["organ".into()],
    };
    gen.datasets = [("thin", -1), ("thick", 1)]
        .into_iter()
        .map(|(name, m)| DatasetSpec {
            name: name.into(),
            case_count: 15,
            annotations: vec![organ(m)],
            train_fraction: None,
        })
        .collect();
    gen
}

pub fn protocol_retention() -> Result<Outcome> {
    let mut margins = Vec::new();
    let mut all_differ = true;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let dir = tempfile::tempdir()?;
        let gen = margin_collection(seed);
        let manifest = generate_collection(&gen, dir.path())?;
        let model = train(&manifest, &budget(seed, 500, 2), &RunOutput::default())?.model();
        let protocols = [&gen.datasets[0].annotations[0], &gen.datasets[1].annotations[0]];
        // [class][protocol] summed dice
        let mut sums = [[0.0; 2]; 2];
        let mut differ = 0;
        let held_out = manifest.case_indices(Split::HeldOut);
        for &i in &held_out {
            let case = generate_case(&gen, i)?;
            ensure!(
                case.dataset as u32 + 1 == manifest.cases[i].dataset_id && case.held_out,
                "case order differs from the manifest"
            );
            let truth = protocols
                .iter()
                .map(|p| annotate(&gen, &case.truth, p))
                .collect::<partseg::Result<Vec<_>>>()?;
            let pred = model.segment(&manifest.load_case(i)?.image)?;
            differ += pred[0]
                .data()
                .iter()
                .zip(pred[1].data())
                .filter(|(a, b)| a != b)
                .count();
            for (c, p) in pred.iter().enumerate() {
                for (k, t) in truth.iter().enumerate() {
                    sums[c][k] += dice_score(p, t)?;
                }
            }
        }
        let n = held_out.len() as f64;
        let own = [sums[0][0] / n, sums[1][1] / n];
        let other = [sums[0][1] / n, sums[1][0] / n];
        margins.push((own[0] - other[0]).min(own[1] - other[1]));
        all_differ &= differ > 0;
        lines.push(format!(
            "seed {seed}: thin {:.1}/{:.1}, thick {:.1}/{:.1}, {differ} differing voxels",
            own[0], other[0], own[1], other[1]
        ));
    }
    let m = median(margins);
    Ok(Outcome::new(
        all_differ && m > 0.0,
        format!("own/other dice; median smallest margin {m:.2}; {}", lines.join("; ")),
    ))
}

pub fn joint_vs_single() -> Result<Outcome> {
    let iterations = 500;
    let mut gaps = Vec::new();
    let mut lines = Vec::new();
    for seed in SEEDS {
        let dir = tempfile::tempdir()?;
        let mut gen = GenConfig::desk();
        gen.seed = seed;
        let manifest = generate_collection(&gen, dir.path())?;
        let smallest = manifest
            .datasets
            .iter()
            .min_by_key(|d| manifest.cases.iter().filter(|c| c.dataset_id == d.dataset_id).count())
            .context("no datasets")?
            .dataset_id;
        let mut single = budget(seed, iterations, 2);
        single.objective = Objective::Softmax;
        let alone = manifest.select_datasets(&[smallest])?;
        let baseline = train(&alone, &single, &RunOutput::default())?.model();
        // the joint run sees all datasets: twice the iterations at twice the batch
        let joint = train(&manifest, &budget(seed, 2 * iterations, 4), &RunOutput::default())?.model();
        let b = dataset_dice(&baseline, &manifest, smallest)?;
        let j = dataset_dice(&joint, &manifest, smallest)?;
        gaps.push(j - b);
        lines.push(format!("seed {seed}: joint {j:.1} vs single {b:.1}"));
    }
    let m = median(gaps);
    Ok(Outcome::new(
        m >= -1.0,
        format!(
            "smallest dataset, median gap {m:+.2} (tolerance -1); {}",
            lines.join("; ")
        ),
    ))
}

pub fn transfer() -> Result<Outcome> {
    let steps = 300;
    let mut gains = Vec::new();
    let mut lines = Vec::new();
    for seed in SEEDS {
        let dir = tempfile::tempdir()?;
        let mut gen = GenConfig::desk();
        gen.seed = seed;
        // five training cases, five held out
        gen.datasets[1].case_count = 10;
        gen.datasets[1].train_fraction = Some(0.5);
        let manifest = generate_collection(&gen, dir.path())?;
        let target = gen
            .datasets
            .iter()
            .position(|d| d.name == "vascular")
            .context("vascular dataset")? as u32
            + 1;
        let small = manifest.select_datasets(&[target])?;
        let train_cases = small.case_indices(Split::Train).len();
        ensure!(train_cases == 5, "target dataset has {train_cases} training cases");

        let pre = train(
            &manifest.select_datasets(&[1, 3])?,
            &budget(seed, 500, 2),
            &RunOutput::default(),
        )?;
        let checkpoint = decode_checkpoint(&pre.checkpoint_bytes())?;
        let mut ft = budget(seed, steps, 2);
        ft.schedule.head_warmup_epochs = 2;
        ft.schedule.full_warmup_epochs = 6;
        let tuned = finetune(&checkpoint, &small, &ft, &RunOutput::default())?.model();
        let scratch = train(&small, &budget(seed, steps, 2), &RunOutput::default())?.model();
        let t = dataset_dice(&tuned, &manifest, target)?;
        let s = dataset_dice(&scratch, &manifest, target)?;
        gains.push(t - s);
        lines.push(format!("seed {seed}: finetuned {t:.1} vs scratch {s:.1}"));
    }
    let m = median(gains);
    Ok(Outcome::new(
        m >= 0.0,
        format!("{steps} steps each, median gain {m:+.2}; {}", lines.join("; ")),
    ))
}
