//! Training, fine-tuning and sliding-window inference.
//!
//! Every batch is a pure function of `(seed, iteration)`: case draws use the
//! stream `(seed, Batch, [iteration])` and each patch `(seed, Patch,
//! [iteration, slot])`. Worker threads only decide who computes a batch, so
//! results do not depend on the worker count.

mod infer;
mod log;

pub use infer::{binarize, gaussian_weights, predict, sliding_windows, Model, Segmenter};
pub use log::{LogRow, TrainLog};

use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::collection::{Case, ClassRef, CollectionManifest, Split};
use crate::losses::{partial_label_loss, softmax_ce_dice, LossBatch, LossOptions};
use crate::ndnet::{
    build_unet, encode_checkpoint, Checkpoint, NetConfig, Network, OutputMode, ParamRole, Tape, Tensor,
};
use crate::rng::{stream, Stream};
use crate::sampling::{
    build_sampler, choose_origin, crop_patch, foreground_voxels, learning_rate, sample_batch, Patch, Sampler,
    ScheduleMode, ScheduleSpec, DEFAULT_FG_BIAS,
};
use crate::{Error, Result};

/// Smoothing factor of the loss average that selects the best checkpoint.
const LOSS_EMA: f64 = 0.9;
/// Batches each worker may run ahead of the optimizer.
const QUEUE_DEPTH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Per-class sigmoid heads with the partial-label loss.
    Sigmoid,
    /// Softmax over background plus the classes of a single dataset.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleOptions {
    pub mode: ScheduleMode,
    #[serde(default = "ten")]
    pub head_warmup_epochs: usize,
    #[serde(default = "fifty")]
    pub full_warmup_epochs: usize,
    #[serde(default = "poly")]
    pub poly_exponent: f64,
}

fn ten() -> usize {
    10
}

fn fifty() -> usize {
    50
}

fn poly() -> f64 {
    0.9
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions {
            mode: ScheduleMode::Standard,
            head_warmup_epochs: ten(),
            full_warmup_epochs: fifty(),
            poly_exponent: poly(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub iterations_per_epoch: usize,
    #[serde(default = "momentum")]
    pub momentum: f64,
    #[serde(default = "yes")]
    pub nesterov: bool,
    #[serde(default = "base_lr")]
    pub base_lr: f64,
    #[serde(default = "clip_norm")]
    pub clip_norm: f64,
    pub seed: u64,
    #[serde(default = "fg_bias")]
    pub fg_bias: f64,
    #[serde(default = "one")]
    pub workers: usize,
    pub net: NetConfig,
    #[serde(default)]
    pub schedule: ScheduleOptions,
    #[serde(default)]
    pub loss: LossOptions,
    #[serde(default = "sigmoid")]
    pub objective: Objective,
}

fn momentum() -> f64 {
    0.99
}

fn yes() -> bool {
    true
}

fn base_lr() -> f64 {
    0.01
}

fn clip_norm() -> f64 {
    12.0
}

fn fg_bias() -> f64 {
    DEFAULT_FG_BIAS
}

fn one() -> usize {
    1
}

fn sigmoid() -> Objective {
    Objective::Sigmoid
}

impl TrainConfig {
    /// Desk-scale defaults: 50 epochs of 50 iterations, batch 2, the desk
    /// network. The class count is taken from the manifest at train time.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 2,
            epochs: 50,
            iterations_per_epoch: 50,
            momentum: momentum(),
            nesterov: true,
            base_lr: base_lr(),
            clip_norm: clip_norm(),
            seed: 0,
            fg_bias: fg_bias(),
            workers: 1,
            net: NetConfig::desk(1),
            schedule: ScheduleOptions::default(),
            loss: LossOptions::default(),
            objective: Objective::Sigmoid,
        }
    }

    pub fn schedule_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            mode: self.schedule.mode,
            base_lr: self.base_lr,
            total_epochs: self.epochs,
            head_warmup_epochs: self.schedule.head_warmup_epochs,
            full_warmup_epochs: self.schedule.full_warmup_epochs,
            poly_exponent: self.schedule.poly_exponent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.epochs == 0 || self.iterations_per_epoch == 0 || self.workers == 0 {
            return bad("batch_size, epochs, iterations_per_epoch and workers must be >= 1");
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return bad("clip_norm must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.fg_bias) {
            return bad("fg_bias must be in [0, 1]");
        }
        if !(self.loss.dice_eps >= 0.0) {
            return bad("dice eps must be >= 0");
        }
        self.schedule_spec().validate()
    }
}

/// SGD with (optionally Nesterov) momentum, PyTorch convention:
/// `buf = mu * buf + g`, step `g + mu * buf` (Nesterov) or `buf`.
/// Parameters whose learning rate is zero are skipped entirely, momentum
/// included, so frozen parameters stay bit-identical.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    buffers: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(net: &Network<f32>, momentum: f64, nesterov: bool) -> Self {
        Sgd {
            momentum,
            nesterov,
            buffers: net.params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn buffer(&self, param: usize) -> &[f32] {
        &self.buffers[param]
    }

    pub fn step(&mut self, net: &mut Network<f32>, lr: impl Fn(ParamRole) -> f64) {
        let mu = self.momentum as f32;
        for (p, buf) in net.params.iter_mut().zip(&mut self.buffers) {
            let rate = lr(p.role) as f32;
            if rate == 0.0 {
                continue;
            }
            for ((v, &g), b) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(buf.iter_mut()) {
                *b = mu * *b + g;
                let d = if self.nesterov { g + mu * *b } else { *b };
                *v -= rate * d;
            }
        }
    }
}

/// Global L2 norm over all parameter gradients, accumulated in f64 in
/// parameter order.
pub fn grad_norm(net: &Network<f32>) -> f64 {
    net.params.iter().map(|p| p.grad.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norms before and after.
pub fn clip_gradients(net: &mut Network<f32>, max_norm: f64) -> (f64, f64) {
    let pre = grad_norm(net);
    if pre > max_norm {
        let s = (max_norm / pre) as f32;
        for p in &mut net.params {
            p.grad.scale(s);
        }
        (pre, grad_norm(net))
    } else {
        (pre, pre)
    }
}

/// A case held in memory with its foreground voxel list.
struct LoadedCase {
    case: Case,
    foreground: Vec<usize>,
}

/// One assembled batch on the global class axis.
pub struct Batch {
    pub iteration: usize,
    pub cases: Vec<usize>,
    pub image: Tensor<f32>,
    pub target: Tensor<f32>,
    pub annotation: Tensor<f32>,
}

struct BatchSource<'a> {
    manifest: &'a CollectionManifest,
    cases: Vec<Option<LoadedCase>>,
    sampler: Sampler,
    seed: u64,
    batch_size: usize,
    patch: [usize; 3],
    fg_bias: f64,
}

impl Batch {
    /// Stacks patches (already on the global class axis) into batch tensors.
    pub fn assemble(
        iteration: usize,
        cases: Vec<usize>,
        patches: &[Patch],
        patch: [usize; 3],
        classes: usize,
    ) -> Result<Self> {
        let p: usize = patch.iter().product();
        let (mut image, mut target, mut annotation) = (Vec::new(), Vec::new(), Vec::new());
        for pt in patches {
            if pt.image.len() != p || pt.target.len() != classes * p || pt.annotation.len() != classes {
                return Err(Error::Shape(format!(
                    "patch does not match {patch:?} with {classes} classes"
                )));
            }
            image.extend_from_slice(&pt.image);
            target.extend(pt.target.iter().map(|&v| f32::from(v)));
            annotation.extend(pt.annotation.iter().map(|&v| f32::from(v)));
        }
        let [x, y, z] = patch;
        let b = patches.len();
        Ok(Batch {
            iteration,
            cases,
            image: Tensor::from_vec(&[b, 1, z, y, x], image)?,
            target: Tensor::from_vec(&[b, classes, z, y, x], target)?,
            annotation: Tensor::from_vec(&[b, classes], annotation)?,
        })
    }
}

impl BatchSource<'_> {
    fn make(&self, iteration: usize) -> Result<Batch> {
        let mut rng = stream(self.seed, Stream::Batch, &[iteration as u64]);
        let picks = sample_batch(&self.sampler, self.batch_size, &mut rng);
        let mut patches = Vec::with_capacity(picks.len());
        for (slot, &ci) in picks.iter().enumerate() {
            let lc = self.cases[ci].as_ref().expect("sampled cases are loaded");
            let mut prng = stream(self.seed, Stream::Patch, &[iteration as u64, slot as u64]);
            let origin = choose_origin(
                lc.case.image.shape(),
                self.patch,
                &lc.foreground,
                self.fg_bias,
                &mut prng,
            );
            patches.push(crop_patch(&lc.case, self.manifest, origin, self.patch)?);
        }
        Batch::assemble(iteration, picks, &patches, self.patch, self.manifest.num_classes())
    }
}

/// Runs `body` over batches `0..total` in order, producing them on `workers`
/// threads (iteration `i` is built by worker `i % workers`).
fn for_each_batch(
    source: &BatchSource<'_>,
    total: usize,
    workers: usize,
    mut body: impl FnMut(Batch) -> Result<()>,
) -> Result<()> {
    if workers <= 1 {
        for i in 0..total {
            body(source.make(i)?)?;
        }
        return Ok(());
    }
    std::thread::scope(|scope| {
        let mut queues: Vec<Receiver<Result<Batch>>> = Vec::with_capacity(workers);
        for w in 0..workers {
            let (tx, rx) = sync_channel(QUEUE_DEPTH);
            queues.push(rx);
            scope.spawn(move || {
                for i in (w..total).step_by(workers) {
                    if tx.send(source.make(i)).is_err() {
                        break;
                    }
                }
            });
        }
        let mut outcome = Ok(());
        for i in 0..total {
            match queues[i % workers].recv() {
                Ok(Ok(batch)) => {
                    if let Err(e) = body(batch) {
                        outcome = Err(e);
                        break;
                    }
                }
                Ok(Err(e)) => {
                    outcome = Err(e);
                    break;
                }
                Err(_) => {
                    outcome = Err(Error::Config(format!("batch worker stopped before iteration {i}")));
                    break;
                }
            }
        }
        // Dropping the receivers unblocks any worker still sending.
        drop(queues);
        outcome
    })
}

/// Voxel labels for the softmax baseline: 0 is background, local class `j`
/// is `j + 1`; where classes overlap the later class wins.
pub fn labels_from_targets(target: &Tensor<f32>, offset: usize, local: usize) -> Vec<u32> {
    let s = target.shape();
    let (b, c) = (s[0], s[1]);
    let n: usize = s[2..].iter().product();
    let mut labels = vec![0u32; b * n];
    for bi in 0..b {
        for j in 0..local {
            let ch = &target.data()[(bi * c + offset + j) * n..(bi * c + offset + j + 1) * n];
            for (l, &v) in labels[bi * n..(bi + 1) * n].iter_mut().zip(ch) {
                if v != 0.0 {
                    *l = j as u32 + 1;
                }
            }
        }
    }
    labels
}

/// Output of a training or fine-tuning run.
pub struct TrainOutcome {
    pub network: Network<f32>,
    pub classes: Vec<ClassRef>,
    pub output: OutputMode,
    pub log: TrainLog,
    pub steps: u64,
}

impl TrainOutcome {
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        encode_checkpoint(&self.network, &self.classes, self.steps, self.output)
    }

    pub fn model(&self) -> Model {
        Model {
            network: self.network.clone(),
            classes: self.classes.clone(),
            output: self.output,
            overlap: 0.5,
        }
    }
}

/// Optional on-disk artefacts of a run.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    /// When set, `latest.ckpt` is written every epoch, `best.ckpt` whenever
    /// the smoothed epoch loss improves, plus `train_log.csv` and
    /// `train_log_classes.csv` at the end.
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn to(dir: impl AsRef<Path>) -> Self {
        RunOutput {
            dir: Some(dir.as_ref().to_path_buf()),
        }
    }
}

/// Network configuration adjusted to the manifest's class count and the
/// objective (the softmax baseline adds a background channel).
fn net_for(config: &TrainConfig, manifest: &CollectionManifest) -> Result<NetConfig> {
    let mut net = config.net.clone();
    net.num_global_classes = match config.objective {
        Objective::Sigmoid => manifest.num_classes(),
        Objective::Softmax => {
            if manifest.datasets.len() != 1 {
                return Err(Error::Config(format!(
                    "the softmax objective trains on one dataset, manifest has {}",
                    manifest.datasets.len()
                )));
            }
            manifest.num_classes() + 1
        }
    };
    Ok(net)
}

pub fn train(manifest: &CollectionManifest, config: &TrainConfig, out: &RunOutput) -> Result<TrainOutcome> {
    config.validate()?;
    let net_cfg = net_for(config, manifest)?;
    let net = build_unet::<f32>(&net_cfg, config.seed)?;
    run(manifest, config, net, out)
}

fn backbone_matches(a: &NetConfig, b: &NetConfig) -> bool {
    a.stages == b.stages
        && a.base_channels == b.base_channels
        && a.channel_growth == b.channel_growth
        && a.max_channels == b.max_channels
        && a.residual_encoder == b.residual_encoder
        && a.normalization == b.normalization
        && a.kernel_size == b.kernel_size
}

/// Backbone from `checkpoint`, fresh heads for the new manifest's classes.
pub fn prepare_finetune(
    checkpoint: &Checkpoint,
    manifest: &CollectionManifest,
    config: &TrainConfig,
) -> Result<Network<f32>> {
    if config.objective != Objective::Sigmoid {
        return Err(Error::Config("fine-tuning uses the sigmoid objective".into()));
    }
    let src = &checkpoint.network.config;
    if !backbone_matches(src, &config.net) {
        return Err(Error::Checkpoint(format!(
            "backbone mismatch: checkpoint has {} stages x {} base channels (residual {}, {:?}), config asks for {} x {} (residual {}, {:?})",
            src.stages,
            src.base_channels,
            src.residual_encoder,
            src.normalization,
            config.net.stages,
            config.net.base_channels,
            config.net.residual_encoder,
            config.net.normalization
        )));
    }
    let mut net = checkpoint.network.clone();
    net.reinit_heads(manifest.num_classes(), config.seed)?;
    net.config.patch_shape = config.net.patch_shape;
    net.config.validate()?;
    net.zero_grad();
    Ok(net)
}

/// Same loop as [`train`] with the fine-tuning schedule, starting from the
/// checkpoint's backbone and re-initialized heads.
pub fn finetune(
    checkpoint: &Checkpoint,
    manifest: &CollectionManifest,
    config: &TrainConfig,
    out: &RunOutput,
) -> Result<TrainOutcome> {
    let mut cfg = config.clone();
    cfg.schedule.mode = ScheduleMode::Finetune;
    cfg.validate()?;
    let net = prepare_finetune(checkpoint, manifest, &cfg)?;
    run(manifest, &cfg, net, out)
}

fn load_cases(manifest: &CollectionManifest) -> Result<Vec<Option<LoadedCase>>> {
    manifest
        .cases
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            if entry.held_out {
                return Ok(None);
            }
            let case = manifest.load_case(i)?;
            let foreground = foreground_voxels(&case);
            Ok(Some(LoadedCase { case, foreground }))
        })
        .collect()
}

/// Result of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub iteration: usize,
    pub loss_total: f64,
    pub loss_bce: f64,
    /// Sum of the dice terms (negative dice).
    pub loss_dice: f64,
    pub per_class: Vec<(f64, f64)>,
    pub gnorm_pre: f64,
    pub gnorm_post: f64,
}

/// Forward, loss, backward, clipping and one SGD step on `batch`.
pub fn train_step(
    net: &mut Network<f32>,
    opt: &mut Sgd,
    batch: Batch,
    config: &TrainConfig,
    manifest: &CollectionManifest,
    lr_backbone: f64,
    lr_heads: f64,
) -> Result<StepStats> {
    let iteration = batch.iteration;
    let mut tape = Tape::new();
    let logits_var = net.record(&mut tape, batch.image)?;
    let logits = tape.value(logits_var);
    let (loss_total, loss_bce, loss_dice, per_class, grad) = match config.objective {
        Objective::Sigmoid => {
            let v = partial_label_loss(
                &LossBatch {
                    logits,
                    targets: &batch.target,
                    annotation: &batch.annotation,
                },
                &config.loss,
            )?;
            let per_class = v.per_class.iter().map(|c| (c.bce, c.dice)).collect();
            (v.total, v.bce_sum(), v.dice_term_sum(), per_class, v.voxel_gradient)
        }
        Objective::Softmax => {
            let labels = labels_from_targets(&batch.target, 0, manifest.num_classes());
            let v = softmax_ce_dice(logits, &labels, config.loss.dice_eps)?;
            (v.total, v.cross_entropy, -v.mean_dice, Vec::new(), v.gradient)
        }
    };
    if !loss_total.is_finite() {
        return Err(Error::NonFinite(format!("loss at iteration {iteration}")));
    }
    net.zero_grad();
    net.backward(&tape, &grad)?;
    let (gnorm_pre, gnorm_post) = clip_gradients(net, config.clip_norm);
    if !gnorm_pre.is_finite() {
        return Err(Error::NonFinite(format!("gradient at iteration {iteration}")));
    }
    opt.step(net, |role| if role.is_head() { lr_heads } else { lr_backbone });
    Ok(StepStats {
        iteration,
        loss_total,
        loss_bce,
        loss_dice,
        per_class,
        gnorm_pre,
        gnorm_post,
    })
}

fn run(
    manifest: &CollectionManifest,
    config: &TrainConfig,
    mut net: Network<f32>,
    out: &RunOutput,
) -> Result<TrainOutcome> {
    let output = match config.objective {
        Objective::Sigmoid => OutputMode::Sigmoid,
        Objective::Softmax => OutputMode::Softmax,
    };
    let train_split = manifest.with_split(Split::Train);
    if train_split.cases.is_empty() {
        return Err(Error::Manifest("no training cases".into()));
    }
    // Sample only over training cases but keep manifest indices.
    let mut sampler = build_sampler(&train_split)?;
    let train_indices = manifest.case_indices(Split::Train);
    sampler.cases = train_indices;
    let source = BatchSource {
        manifest,
        cases: load_cases(manifest)?,
        sampler,
        seed: config.seed,
        batch_size: config.batch_size,
        patch: config.net.patch_shape,
        fg_bias: config.fg_bias,
    };
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let spec = config.schedule_spec();
    let mut opt = Sgd::new(&net, config.momentum, config.nesterov);
    let mut log = TrainLog::default();
    let classes = manifest.global_classes.clone();
    let start = Instant::now();
    let ipe = config.iterations_per_epoch;
    let total = config.epochs * ipe;
    let (mut epoch_loss, mut smoothed, mut best) = (0.0, None::<f64>, f64::INFINITY);
    let mut steps = 0u64;

    for_each_batch(&source, total, config.workers, |batch| {
        let epoch = batch.iteration / ipe;
        let lr_backbone = learning_rate(&spec, epoch, ParamRole::Backbone)?;
        let lr_heads = learning_rate(&spec, epoch, ParamRole::Head(0))?;

        let st = train_step(&mut net, &mut opt, batch, config, manifest, lr_backbone, lr_heads)?;
        steps += 1;
        log.push(LogRow {
            epoch,
            iter: st.iteration,
            loss_total: st.loss_total,
            loss_bce: st.loss_bce,
            loss_dice: st.loss_dice,
            lr_backbone,
            lr_heads,
            gnorm_pre: st.gnorm_pre,
            gnorm_post: st.gnorm_post,
            seconds: start.elapsed().as_secs_f64(),
            per_class: st.per_class,
        });

        epoch_loss += st.loss_total;
        if (st.iteration + 1) % ipe == 0 {
            let mean = epoch_loss / ipe as f64;
            epoch_loss = 0.0;
            let s = smoothed.map_or(mean, |s| LOSS_EMA * s + (1.0 - LOSS_EMA) * mean);
            smoothed = Some(s);
            if let Some(dir) = &out.dir {
                crate::ndnet::save_checkpoint(dir.join("latest.ckpt"), &net, &classes, steps, output)?;
                if s < best {
                    best = s;
                    crate::ndnet::save_checkpoint(dir.join("best.ckpt"), &net, &classes, steps, output)?;
                }
            }
        }
        Ok(())
    })?;

    if let Some(dir) = &out.dir {
        log.write_csv(dir.join("train_log.csv"))?;
        log.write_class_csv(dir.join("train_log_classes.csv"), &classes)?;
    }
    net.zero_grad();
    Ok(TrainOutcome {
        network: net,
        classes,
        output,
        log,
        steps,
    })
}
