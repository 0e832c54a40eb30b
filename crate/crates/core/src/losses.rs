//! Dataset- and class-adaptive segmentation loss.
//!
//! For every global class `c`, only samples whose dataset annotates `c`
//! contribute (indicator `m[b, c]`):
//!
//! ```text
//! L = sum_c [ BCE_c - dice_c ]
//! BCE_c  = (1 / I_c) * sum_{b: m=1} sum_i bce(logit, y)
//! dice_c = 2 * sum_z m*p*y / (sum_z m*p + sum_z m*y + eps)
//! ```
//!
//! `z` runs over batch and voxels jointly, so the dice is pooled over the
//! batch rather than averaged per image. Classes are summed, not averaged.
//! Accumulation order is fixed (sample, then voxel) and done in f64.

use serde::{Deserialize, Serialize};

use crate::ndnet::{softmax_channels, Element, Tensor};
use crate::{Error, Result};

pub const DEFAULT_DICE_EPS: f64 = 1e-5;

/// Normalizer `I_c` for the BCE term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BceNormalization {
    /// Voxels per sample times the number of samples annotating `c`.
    PerAnnotatedSample,
    /// Voxels per sample only (sums over samples).
    VoxelsOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossOptions {
    /// Added to the dice denominator only; `0.0` gives the unsmoothed form.
    pub dice_eps: f64,
    pub bce_norm: BceNormalization,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            dice_eps: DEFAULT_DICE_EPS,
            bce_norm: BceNormalization::PerAnnotatedSample,
        }
    }
}

/// Logits and binary targets `[B, C, ...]`, annotation indicators `[B, C]`.
#[derive(Clone, Copy, Debug)]
pub struct LossBatch<'a, T> {
    pub logits: &'a Tensor<T>,
    pub targets: &'a Tensor<T>,
    pub annotation: &'a Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassLoss {
    pub bce: f64,
    /// Dice coefficient in [0, 1]; the loss uses `-dice`.
    pub dice: f64,
    pub annotated_samples: usize,
}

impl ClassLoss {
    pub fn dice_term(&self) -> f64 {
        -self.dice
    }
}

#[derive(Clone, Debug)]
pub struct LossValue<T> {
    pub total: f64,
    pub per_class: Vec<ClassLoss>,
    /// dL/dlogits, exactly zero wherever the annotation indicator is zero.
    pub voxel_gradient: Tensor<T>,
}

impl<T> LossValue<T> {
    pub fn bce_sum(&self) -> f64 {
        self.per_class.iter().map(|c| c.bce).sum()
    }

    pub fn dice_term_sum(&self) -> f64 {
        self.per_class.iter().map(ClassLoss::dice_term).sum()
    }
}

struct Dims {
    b: usize,
    c: usize,
    n: usize,
}

fn dims<T: Element>(x: &Tensor<T>, what: &str) -> Result<Dims> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::LossInput(format!("{what} must be [B, C, ...], got {s:?}")));
    }
    Ok(Dims {
        b: s[0],
        c: s[1],
        n: s[2..].iter().product(),
    })
}

fn is_binary<T: Element>(v: T) -> bool {
    v == T::zero() || v == T::one()
}

fn check_pair<T: Element>(a: &Tensor<T>, targets: &Tensor<T>, annotation: &Tensor<T>) -> Result<Dims> {
    let d = dims(a, "logits")?;
    if targets.shape() != a.shape() {
        return Err(Error::LossInput(format!(
            "targets {:?} do not match predictions {:?}",
            targets.shape(),
            a.shape()
        )));
    }
    if annotation.shape() != [d.b, d.c] {
        return Err(Error::LossInput(format!(
            "annotation mask {:?}, expected [{}, {}]",
            annotation.shape(),
            d.b,
            d.c
        )));
    }
    if !targets.data().iter().all(|&v| is_binary(v)) {
        return Err(Error::LossInput("target outside {0, 1}".into()));
    }
    if !annotation.data().iter().all(|&v| is_binary(v)) {
        return Err(Error::LossInput("annotation mask outside {0, 1}".into()));
    }
    Ok(d)
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `max(l, 0) - l*y + ln(1 + exp(-|l|))`
#[inline]
pub fn stable_bce(logit: f64, y: f64) -> f64 {
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// Masked per-class BCE on logits and its gradient with respect to the logits.
pub fn sigmoid_bce<T: Element>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    annotation: &Tensor<T>,
    norm: BceNormalization,
) -> Result<(Vec<f64>, Tensor<T>)> {
    let d = check_pair(logits, targets, annotation)?;
    let mut grad = Tensor::zeros(logits.shape());
    let mut out = vec![0.0; d.c];
    for c in 0..d.c {
        let annotated: Vec<usize> = (0..d.b)
            .filter(|&b| annotation.data()[b * d.c + c] != T::zero())
            .collect();
        if annotated.is_empty() {
            continue;
        }
        let denom = match norm {
            BceNormalization::PerAnnotatedSample => (d.n * annotated.len()) as f64,
            BceNormalization::VoxelsOnly => d.n as f64,
        };
        let mut acc = 0.0;
        for &b in &annotated {
            let off = (b * d.c + c) * d.n;
            for i in off..off + d.n {
                let l = logits.data()[i].as_f64();
                let y = targets.data()[i].as_f64();
                acc += stable_bce(l, y);
                grad.data_mut()[i] = T::of_f64((sigmoid(l) - y) / denom);
            }
        }
        out[c] = acc / denom;
    }
    Ok((out, grad))
}

/// Batch-pooled dice per class on probabilities, and d(dice)/d(probability).
pub fn batch_dice<T: Element>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
    annotation: &Tensor<T>,
    eps: f64,
) -> Result<(Vec<f64>, Tensor<T>)> {
    let d = check_pair(probs, targets, annotation)?;
    if probs
        .data()
        .iter()
        .any(|&p| !(p.as_f64() >= -1e-6 && p.as_f64() <= 1.0 + 1e-6))
    {
        return Err(Error::LossInput("probability outside [0, 1]".into()));
    }
    let mut grad = Tensor::zeros(probs.shape());
    let mut out = vec![0.0; d.c];
    for c in 0..d.c {
        let annotated: Vec<usize> = (0..d.b)
            .filter(|&b| annotation.data()[b * d.c + c] != T::zero())
            .collect();
        let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
        for &b in &annotated {
            let off = (b * d.c + c) * d.n;
            for i in off..off + d.n {
                let p = probs.data()[i].as_f64();
                let y = targets.data()[i].as_f64();
                inter += p * y;
                psum += p;
                ysum += y;
            }
        }
        let denom = psum + ysum + eps;
        if annotated.is_empty() || denom <= 0.0 {
            continue;
        }
        out[c] = 2.0 * inter / denom;
        for &b in &annotated {
            let off = (b * d.c + c) * d.n;
            for i in off..off + d.n {
                let y = targets.data()[i].as_f64();
                grad.data_mut()[i] = T::of_f64((2.0 * y * denom - 2.0 * inter) / (denom * denom));
            }
        }
    }
    Ok((out, grad))
}

impl<'a, T: Element> LossBatch<'a, T> {
    pub fn validate(&self) -> Result<()> {
        self.checked_dims().map(|_| ())
    }

    fn checked_dims(&self) -> Result<Dims> {
        let d = check_pair(self.logits, self.targets, self.annotation)?;
        for b in 0..d.b {
            for c in 0..d.c {
                if self.annotation.data()[b * d.c + c] == T::zero() {
                    let off = (b * d.c + c) * d.n;
                    if self.targets.data()[off..off + d.n].iter().any(|&v| v != T::zero()) {
                        return Err(Error::LossInput(format!(
                            "sample {b} has a nonempty target for unannotated class {c}"
                        )));
                    }
                }
            }
        }
        Ok(d)
    }
}

/// Sum over classes of masked BCE minus masked batch dice, with the full
/// gradient with respect to the logits.
pub fn partial_label_loss<T: Element>(batch: &LossBatch<'_, T>, opts: &LossOptions) -> Result<LossValue<T>> {
    let d = batch.checked_dims()?;
    let (bce, mut grad) = sigmoid_bce(batch.logits, batch.targets, batch.annotation, opts.bce_norm)?;
    let probs = batch.logits.map(|v| T::of_f64(sigmoid(v.as_f64())));
    let (dice, dgrad) = batch_dice(&probs, batch.targets, batch.annotation, opts.dice_eps)?;
    for ((g, &dd), &p) in grad.data_mut().iter_mut().zip(dgrad.data()).zip(probs.data()) {
        if dd != T::zero() {
            let p = p.as_f64();
            *g = T::of_f64(g.as_f64() - dd.as_f64() * p * (1.0 - p));
        }
    }
    let per_class: Vec<ClassLoss> = (0..d.c)
        .map(|c| ClassLoss {
            bce: bce[c],
            dice: dice[c],
            annotated_samples: (0..d.b)
                .filter(|&b| batch.annotation.data()[b * d.c + c] != T::zero())
                .count(),
        })
        .collect();
    let total = per_class
        .iter()
        .filter(|c| c.annotated_samples > 0)
        .map(|c| c.bce + c.dice_term())
        .sum();
    if !f64::is_finite(total) {
        let bad = per_class
            .iter()
            .position(|c| !(c.bce + c.dice).is_finite())
            .unwrap_or(0);
        return Err(Error::NonFinite(format!("loss term of class {bad}")));
    }
    Ok(LossValue {
        total,
        per_class,
        voxel_gradient: grad,
    })
}

#[derive(Clone, Debug)]
pub struct SoftmaxLoss<T> {
    pub total: f64,
    pub cross_entropy: f64,
    /// Mean batch dice over the foreground channels.
    pub mean_dice: f64,
    pub gradient: Tensor<T>,
}

/// Baseline: softmax over `[background, classes...]`, cross-entropy averaged
/// over all voxels plus the mean foreground batch dice (as a penalty
/// `-mean_dice`). `labels` holds one channel index per voxel in `[B, ...]`
/// order.
pub fn softmax_ce_dice<T: Element>(logits: &Tensor<T>, labels: &[u32], eps: f64) -> Result<SoftmaxLoss<T>> {
    let d = dims(logits, "logits")?;
    if d.c < 2 {
        return Err(Error::LossInput(
            "softmax baseline needs background plus at least one class".into(),
        ));
    }
    if labels.len() != d.b * d.n {
        return Err(Error::LossInput(format!(
            "{} labels for {} voxels",
            labels.len(),
            d.b * d.n
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= d.c) {
        return Err(Error::LossInput(format!(
            "label {bad} out of range for {} channels",
            d.c
        )));
    }
    let x: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    let p = softmax_channels(&x, d.b, d.c, d.n);
    let at = |b: usize, c: usize, i: usize| (b * d.c + c) * d.n + i;
    let total_vox = (d.b * d.n) as f64;

    let mut ce = 0.0;
    for b in 0..d.b {
        for i in 0..d.n {
            let l = labels[b * d.n + i] as usize;
            let m = (0..d.c).map(|c| x[at(b, c, i)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..d.c).map(|c| (x[at(b, c, i)] - m).exp()).sum::<f64>().ln();
            ce += lse - x[at(b, l, i)];
        }
    }
    ce /= total_vox;

    // dL/dp from the dice part, then through the softmax Jacobian.
    let fg = (d.c - 1) as f64;
    let mut dp = vec![0.0; x.len()];
    let mut dice_sum = 0.0;
    for c in 1..d.c {
        let (mut inter, mut psum, mut ysum) = (0.0, 0.0, 0.0);
        for b in 0..d.b {
            for i in 0..d.n {
                let y = f64::from(labels[b * d.n + i] as usize == c);
                let pv = p[at(b, c, i)];
                inter += pv * y;
                psum += pv;
                ysum += y;
            }
        }
        let denom = psum + ysum + eps;
        if denom <= 0.0 {
            continue;
        }
        dice_sum += 2.0 * inter / denom;
        for b in 0..d.b {
            for i in 0..d.n {
                let y = f64::from(labels[b * d.n + i] as usize == c);
                dp[at(b, c, i)] = -(2.0 * y * denom - 2.0 * inter) / (denom * denom) / fg;
            }
        }
    }
    let mut grad = vec![0.0; x.len()];
    for b in 0..d.b {
        for i in 0..d.n {
            let l = labels[b * d.n + i] as usize;
            let dot: f64 = (0..d.c).map(|c| dp[at(b, c, i)] * p[at(b, c, i)]).sum();
            for c in 0..d.c {
                let k = at(b, c, i);
                let ce_g = (p[k] - f64::from(c == l)) / total_vox;
                grad[k] = ce_g + p[k] * (dp[k] - dot);
            }
        }
    }
    let mean_dice = dice_sum / fg;
    Ok(SoftmaxLoss {
        total: ce - mean_dice,
        cross_entropy: ce,
        mean_dice,
        gradient: Tensor::from_f64(logits.shape(), &grad)?,
    })
}
