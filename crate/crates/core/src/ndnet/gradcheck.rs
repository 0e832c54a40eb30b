//! Central finite-difference gradient checks in f64.
//!
//! A graph output is reduced to a scalar `L = sum(out * R)` with a fixed
//! random `R`, so every output element participates with a distinct weight.
//! Each input coordinate is perturbed by `h = step * max(1, |x|)`; a
//! coordinate is skipped when either perturbation changes the sign pattern
//! of any leaky-ReLU input, since the function is not differentiable there.
//!
//! The error of coordinate `i` in tensor `t` is
//! `|a - n| / max(|a|, |n|, floor, block_floor * max_t |a|)`: coordinates
//! whose gradient is tiny next to the rest of their tensor are measured
//! against that tensor's scale, where finite differences cannot resolve them.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use super::{build_unet, NetConfig, Normalization, Tape, Tensor, Var};
use crate::losses::{
    batch_dice, partial_label_loss, sigmoid_bce, softmax_ce_dice, BceNormalization, LossBatch, LossOptions,
};
use crate::rng::{stream, Stream};
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    /// Default tolerance; a few kinds carry a tighter one.
    pub tolerance: f64,
    /// Absolute lower bound of the relative-error denominator.
    pub floor: f64,
    /// Fraction of the largest gradient magnitude in the same tensor that
    /// also bounds the denominator.
    pub block_floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-4,
            tolerance: 1e-5,
            floor: 1e-6,
            block_floor: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KindResult {
    pub kind: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub compared: usize,
    pub skipped: usize,
}

impl KindResult {
    pub fn passed(&self) -> bool {
        self.compared > 0 && self.max_rel_error < self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub results: Vec<KindResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(KindResult::passed)
    }

    pub fn get(&self, kind: &str) -> Option<&KindResult> {
        self.results.iter().find(|r| r.kind == kind)
    }

    /// Folds `r` into an existing entry of the same kind (max error, summed
    /// counts, tightest tolerance).
    pub fn merge(&mut self, r: KindResult) {
        match self.results.iter_mut().find(|e| e.kind == r.kind) {
            Some(e) => {
                e.max_rel_error = e.max_rel_error.max(r.max_rel_error);
                e.tolerance = e.tolerance.min(r.tolerance);
                e.compared += r.compared;
                e.skipped += r.skipped;
            }
            None => self.results.push(r),
        }
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<32} {:>12} {:>10} {:>9} {:>8}  status",
            "kind", "max_rel_err", "tolerance", "compared", "skipped"
        )?;
        for r in &self.results {
            writeln!(
                f,
                "{:<32} {:>12.3e} {:>10.0e} {:>9} {:>8}  {}",
                r.kind,
                r.max_rel_error,
                r.tolerance,
                r.compared,
                r.skipped,
                if r.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Value of the scalar objective plus the kink signature at that point.
pub struct Probe {
    pub value: f64,
    pub signature: Vec<i8>,
}

/// Compares `analytic` against central differences of `f` around `x0`.
/// `blocks` lists the lengths of the tensors concatenated in `x0`.
pub fn compare_flat(
    kind: &str,
    x0: &[f64],
    analytic: &[f64],
    blocks: &[usize],
    tolerance: f64,
    opts: &GradcheckOptions,
    mut f: impl FnMut(&[f64]) -> Result<Probe>,
) -> Result<KindResult> {
    assert_eq!(x0.len(), analytic.len(), "gradient length mismatch");
    assert_eq!(
        blocks.iter().sum::<usize>(),
        x0.len(),
        "block lengths do not cover the input"
    );
    let mut scale = Vec::with_capacity(x0.len());
    let mut off = 0;
    for &n in blocks {
        let m = analytic[off..off + n].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        scale.extend(std::iter::repeat(opts.floor.max(opts.block_floor * m)).take(n));
        off += n;
    }
    let base = f(x0)?;
    let mut x = x0.to_vec();
    let (mut worst, mut compared, mut skipped) = (0.0f64, 0usize, 0usize);
    for i in 0..x.len() {
        let h = opts.step * x0[i].abs().max(1.0);
        x[i] = x0[i] + h;
        let plus = f(&x)?;
        x[i] = x0[i] - h;
        let minus = f(&x)?;
        x[i] = x0[i];
        if plus.signature != base.signature || minus.signature != base.signature {
            skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(scale[i]);
        worst = worst.max(err);
        compared += 1;
    }
    Ok(KindResult {
        kind: kind.to_string(),
        max_rel_error: worst,
        tolerance,
        compared,
        skipped,
    })
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn split(flat: &[f64], shapes: &[Vec<usize>]) -> Result<Vec<Tensor<f64>>> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::from_f64(s, &flat[off..off + n]);
            off += n;
            t
        })
        .collect()
}

/// Checks a graph built on the tape from leaf inputs, w.r.t. every input.
pub fn check_graph(
    kind: &str,
    inputs: &[Tensor<f64>],
    tolerance: f64,
    opts: &GradcheckOptions,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<KindResult> {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let record = |xs: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars = xs.iter().map(|x| tape.leaf(x.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = record(inputs)?;
    let mut rng = stream(opts.seed, Stream::Misc, &[kind.len() as u64, tape.len() as u64]);
    let weights = random(tape.value(out).shape(), &mut rng, 1.0);
    let grads = tape.backward(out, weights.clone())?;
    let mut analytic = Vec::new();
    let mut x0 = Vec::new();
    for (v, x) in vars.iter().zip(inputs) {
        x0.extend_from_slice(x.data());
        match grads.get(*v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat(0.0).take(x.numel())),
        }
    }
    let blocks: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    compare_flat(kind, &x0, &analytic, &blocks, tolerance, opts, |flat| {
        let (tape, _, out) = record(&split(flat, &shapes)?)?;
        Ok(Probe {
            value: dot(tape.value(out), &weights),
            signature: tape.kink_signature(),
        })
    })
}

/// Checks a smooth scalar function that returns its own gradient.
pub fn check_function(
    kind: &str,
    x: &Tensor<f64>,
    tolerance: f64,
    opts: &GradcheckOptions,
    f: impl Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
) -> Result<KindResult> {
    let (_, g) = f(x)?;
    compare_flat(kind, x.data(), g.data(), &[x.numel()], tolerance, opts, |flat| {
        Ok(Probe {
            value: f(&Tensor::from_f64(x.shape(), flat)?)?.0,
            signature: Vec::new(),
        })
    })
}

/// A small batch with partial annotation: `[B, C, ...]` logits, binary
/// targets that are empty wherever the class is unannotated, and `[B, C]`
/// indicators.
pub fn partial_batch(
    batch: usize,
    classes: usize,
    spatial: &[usize],
    seed: u64,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = stream(seed, Stream::Misc, &[batch as u64, classes as u64, 17]);
    let n: usize = spatial.iter().product();
    let mut shape = vec![batch, classes];
    shape.extend_from_slice(spatial);
    let mut ann = vec![0.0; batch * classes];
    for b in 0..batch {
        for c in 0..classes {
            // Keep at least one annotated class per sample and one
            // unannotated pair overall.
            ann[b * classes + c] = if c == b % classes {
                1.0
            } else if (b + c) % 3 == 2 {
                0.0
            } else {
                f64::from(rng.random_bool(0.6))
            };
        }
    }
    let logits: Vec<f64> = (0..batch * classes * n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let targets: Vec<f64> = (0..batch * classes * n)
        .map(|i| {
            let bc = i / n;
            if ann[bc] == 0.0 {
                0.0
            } else {
                f64::from(rng.random_bool(0.4))
            }
        })
        .collect();
    (
        Tensor::from_f64(&shape, &logits).expect("shape"),
        Tensor::from_f64(&shape, &targets).expect("shape"),
        Tensor::from_f64(&[batch, classes], &ann).expect("shape"),
    )
}

fn random(shape: &[usize], rng: &mut impl Rng, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_f64(shape, &data).expect("shape")
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn primitive_suite(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = stream(opts.seed, Stream::Misc, &[1]);
    let mut report = GradcheckReport::default();
    let tol = opts.tolerance;
    let conv_tol = tol.min(1e-6);

    let x = random(&[1, 2, 6, 6, 6], &mut rng, 1.0);
    let w = random(&[3, 2, 3, 3, 3], &mut rng, 0.5);
    let b = random(&[3], &mut rng, 0.5);
    report.merge(check_graph("conv3d", &[x.clone(), w, b], conv_tol, opts, |t, v| {
        t.conv3d(v[0], v[1], Some(v[2]), 1)
    })?);
    let w2 = random(&[2, 2, 3, 3, 3], &mut rng, 0.5);
    report.merge(check_graph("conv3d", &[x.clone(), w2], conv_tol, opts, |t, v| {
        t.conv3d(v[0], v[1], None, 2)
    })?);
    let w1 = random(&[4, 2, 1, 1, 1], &mut rng, 0.5);
    let b1 = random(&[4], &mut rng, 0.5);
    report.merge(check_graph("conv3d", &[x, w1, b1], conv_tol, opts, |t, v| {
        t.conv3d(v[0], v[1], Some(v[2]), 1)
    })?);

    let small = random(&[2, 2, 2, 3, 2], &mut rng, 1.0);
    report.merge(check_graph("upsample2", &[small.clone()], tol, opts, |t, v| {
        t.upsample2(v[0])
    })?);
    let other = random(&[2, 3, 2, 3, 2], &mut rng, 1.0);
    report.merge(check_graph("concat", &[small.clone(), other], tol, opts, |t, v| {
        t.concat(&[v[0], v[1]], 1)
    })?);
    let same = random(&[2, 2, 2, 3, 2], &mut rng, 1.0);
    report.merge(check_graph("add", &[small.clone(), same], tol, opts, |t, v| {
        t.add(v[0], v[1])
    })?);

    let mut kinked = random(&[1, 2, 3, 3, 3], &mut rng, 1.0);
    kinked.data_mut()[0] = 0.0;
    report.merge(check_graph("leaky_relu", &[kinked], tol, opts, |t, v| {
        t.leaky_relu(v[0], 0.01)
    })?);

    let xn = random(&[2, 3, 4, 4, 4], &mut rng, 2.0);
    let g = random(&[3], &mut rng, 1.5);
    let be = random(&[3], &mut rng, 1.0);
    report.merge(check_graph(
        "instance_norm",
        &[xn.clone(), g, be],
        tol,
        opts,
        |t, v| t.instance_norm(v[0], Some(v[1]), Some(v[2]), super::INSTANCE_NORM_EPS),
    )?);
    report.merge(check_graph("instance_norm", &[xn], tol, opts, |t, v| {
        t.instance_norm(v[0], None, None, super::INSTANCE_NORM_EPS)
    })?);

    let xs = random(&[2, 3, 2, 2, 2], &mut rng, 3.0);
    report.merge(check_graph("sigmoid", &[xs.clone()], tol, opts, |t, v| {
        t.sigmoid(v[0])
    })?);
    report.merge(check_graph("softmax", &[xs.clone()], tol, opts, |t, v| {
        t.softmax(v[0])
    })?);
    report.merge(check_graph("sum", &[xs.clone()], tol, opts, |t, v| {
        t.sum(v[0], &[2, 3, 4])
    })?);
    report.merge(check_graph("sum", &[xs.clone()], tol, opts, |t, v| t.sum(v[0], &[0]))?);
    report.merge(check_graph("mean", &[xs.clone()], tol, opts, |t, v| {
        t.mean(v[0], &[0, 2, 3, 4])
    })?);
    report.merge(check_graph("mean", &[xs], tol, opts, |t, v| t.mean(v[0], &[1]))?);
    Ok(report)
}

pub fn loss_suite(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    let tol = opts.tolerance.min(1e-6);
    let (logits, targets, ann) = partial_batch(2, 3, &[4, 4, 4], opts.seed);

    for norm in [BceNormalization::PerAnnotatedSample, BceNormalization::VoxelsOnly] {
        report.merge(check_function("loss.sigmoid_bce", &logits, tol, opts, |l| {
            let (v, g) = sigmoid_bce(l, &targets, &ann, norm)?;
            Ok((v.iter().sum(), g))
        })?);
    }

    // Dice on probabilities: perturb pre-sigmoid values so probabilities stay
    // inside (0, 1), and chain the probability gradient by hand.
    report.merge(check_function("loss.batch_dice", &logits, tol, opts, |l| {
        let p = l.map(sigmoid);
        let (v, g) = batch_dice(&p, &targets, &ann, 1e-5)?;
        let mut chained = g;
        for (gv, pv) in chained.data_mut().iter_mut().zip(p.data()) {
            *gv *= pv * (1.0 - pv);
        }
        Ok((v.iter().sum(), chained))
    })?);

    for eps in [1e-5, 0.0] {
        for norm in [BceNormalization::PerAnnotatedSample, BceNormalization::VoxelsOnly] {
            let lo = LossOptions {
                dice_eps: eps,
                bce_norm: norm,
            };
            report.merge(check_function("loss.partial_label", &logits, tol, opts, |l| {
                let v = partial_label_loss(
                    &LossBatch {
                        logits: l,
                        targets: &targets,
                        annotation: &ann,
                    },
                    &lo,
                )?;
                Ok((v.total, v.voxel_gradient))
            })?);
        }
    }

    let mut rng = stream(opts.seed, Stream::Misc, &[2]);
    let sm_logits = random(&[2, 4, 4, 4, 4], &mut rng, 2.0);
    let labels: Vec<u32> = (0..2 * 64).map(|_| rng.random_range(0..4)).collect();
    report.merge(check_function("loss.softmax_ce_dice", &sm_logits, tol, opts, |l| {
        let v = softmax_ce_dice(l, &labels, 1e-5)?;
        Ok((v.total, v.gradient))
    })?);
    Ok(report)
}

/// The full U-Net followed by the partial-label loss, checked against the
/// input and every parameter.
pub fn network_check(
    kind: &str,
    config: &NetConfig,
    batch: usize,
    tolerance: f64,
    opts: &GradcheckOptions,
) -> Result<KindResult> {
    let mut net = build_unet::<f64>(config, opts.seed)?;
    let [z, y, x] = config.tensor_spatial();
    let mut rng = stream(opts.seed, Stream::Misc, &[3, batch as u64]);
    let input = random(&[batch, 1, z, y, x], &mut rng, 1.5);
    let (_, targets, ann) = partial_batch(batch, config.num_global_classes, &[z, y, x], opts.seed ^ 0x5a);
    let lo = LossOptions::default();

    let objective =
        |net: &super::Network<f64>, input: &Tensor<f64>| -> Result<(Tape<f64>, crate::losses::LossValue<f64>)> {
            let mut tape = Tape::new();
            let out = net.record(&mut tape, input.clone())?;
            let v = partial_label_loss(
                &LossBatch {
                    logits: tape.value(out),
                    targets: &targets,
                    annotation: &ann,
                },
                &lo,
            )?;
            Ok((tape, v))
        };

    let (tape, v) = objective(&net, &input)?;
    net.zero_grad();
    let dinput = net.backward(&tape, &v.voxel_gradient)?;
    let mut x0 = input.data().to_vec();
    let mut analytic = dinput.data().to_vec();
    let mut blocks = vec![input.numel()];
    for p in &net.params {
        x0.extend_from_slice(p.value.data());
        analytic.extend_from_slice(p.grad.data());
        blocks.push(p.value.numel());
    }
    let in_len = input.numel();
    let mut probe_net = net.cast::<f64>();
    compare_flat(kind, &x0, &analytic, &blocks, tolerance, opts, |flat| {
        let inp = Tensor::from_f64(input.shape(), &flat[..in_len])?;
        let mut off = in_len;
        for p in &mut probe_net.params {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        let (tape, v) = objective(&probe_net, &inp)?;
        Ok(Probe {
            value: v.total,
            signature: tape.kink_signature(),
        })
    })
}

/// Tiny network configuration for composed checks.
pub fn tiny_config(normalization: Normalization, residual: bool, classes: usize) -> NetConfig {
    NetConfig {
        stages: 2,
        base_channels: 2,
        channel_growth: 2,
        max_channels: None,
        residual_encoder: residual,
        normalization,
        leaky_slope: 0.01,
        num_global_classes: classes,
        patch_shape: [4, 4, 4],
        kernel_size: 3,
    }
}

pub fn network_suite(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for (norm, residual, label) in [
        (Normalization::Instance, true, "network+partial_label(instance)"),
        (Normalization::None, false, "network+partial_label(none)"),
    ] {
        let cfg = tiny_config(norm, residual, 3);
        report.merge(network_check(label, &cfg, 2, opts.tolerance, opts)?);
    }
    Ok(report)
}

/// Every primitive, every loss, and the composed network with loss.
pub fn run_suite(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = primitive_suite(opts)?;
    for part in [loss_suite(opts)?, network_suite(opts)?] {
        for r in part.results {
            report.merge(r);
        }
    }
    Ok(report)
}

/// Per-kind summary keyed by name.
pub fn summary(report: &GradcheckReport) -> BTreeMap<String, f64> {
    report
        .results
        .iter()
        .map(|r| (r.kind.clone(), r.max_rel_error))
        .collect()
}
