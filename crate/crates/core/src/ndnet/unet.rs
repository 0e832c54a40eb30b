//! Configurable 3-D U-Net with a shared backbone and one independent 1x1x1
//! sigmoid head per global class.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{Element, Tensor};
use crate::rng::{stream, Stream};
use crate::{Error, Result};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    Instance,
}

fn default_kernel() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub stages: usize,
    pub base_channels: usize,
    pub channel_growth: usize,
    #[serde(default)]
    pub max_channels: Option<usize>,
    pub residual_encoder: bool,
    pub normalization: Normalization,
    pub leaky_slope: f64,
    pub num_global_classes: usize,
    /// Patch extent per grid axis (X, Y, Z).
    pub patch_shape: [usize; 3],
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
}

impl NetConfig {
    /// CPU-sized default: three stages, 8 base channels doubling, 32^3 patches.
    pub fn desk(num_global_classes: usize) -> Self {
        NetConfig {
            stages: 3,
            base_channels: 8,
            channel_growth: 2,
            max_channels: None,
            residual_encoder: false,
            normalization: Normalization::Instance,
            leaky_slope: 0.01,
            num_global_classes,
            patch_shape: [32, 32, 32],
            kernel_size: 3,
        }
    }

    /// Full-size preset: 96 x 192 x 192 patches (axial extent first) with a
    /// six-stage residual-encoder topology. Recorded for reference; far too
    /// large for CPU training.
    pub fn full_scale(num_global_classes: usize) -> Self {
        NetConfig {
            stages: 6,
            base_channels: 32,
            channel_growth: 2,
            max_channels: Some(320),
            residual_encoder: true,
            normalization: Normalization::Instance,
            leaky_slope: 0.01,
            num_global_classes,
            patch_shape: [192, 192, 96],
            kernel_size: 3,
        }
    }

    pub fn channels(&self, stage: usize) -> usize {
        let c = self.base_channels * self.channel_growth.pow(stage as u32);
        self.max_channels.map_or(c, |m| c.min(m))
    }

    /// Spatial extents in tensor order `[Z, Y, X]`.
    pub fn tensor_spatial(&self) -> [usize; 3] {
        [self.patch_shape[2], self.patch_shape[1], self.patch_shape[0]]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages == 0 {
            return bad("stages must be >= 1".into());
        }
        if self.base_channels == 0 || self.channel_growth == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.num_global_classes == 0 {
            return bad("network needs at least one class".into());
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky slope {} outside [0, 1)", self.leaky_slope));
        }
        let div = 1usize << (self.stages - 1);
        if self.patch_shape.iter().any(|&p| p == 0 || p % div != 0) {
            return bad(format!(
                "patch shape {:?} not divisible by 2^{} = {div}",
                self.patch_shape,
                self.stages - 1
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Backbone,
    /// Head of the given global class.
    Head(usize),
}

impl ParamRole {
    pub fn is_head(self) -> bool {
        matches!(self, ParamRole::Head(_))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvLayer {
    w: usize,
    b: usize,
    stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Block {
    conv: ConvLayer,
    norm: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
struct StageLayout {
    blocks: [Block; 2],
    /// `Some(None)`: identity skip; `Some(Some(p))`: projection skip.
    skip: Option<Option<ConvLayer>>,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    encoder: Vec<StageLayout>,
    decoder: Vec<StageLayout>,
    heads: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub config: NetConfig,
    pub params: Vec<Parameter<T>>,
    layout: Layout,
}

struct Builder<T> {
    params: Vec<Parameter<T>>,
    seed: u64,
}

impl<T: Element> Builder<T> {
    fn push(&mut self, name: String, role: ParamRole, value: Tensor<T>) -> usize {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            role,
            value,
            grad,
        });
        self.params.len() - 1
    }

    fn he_uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|_| T::of_f64(rng.random_range(-bound..bound))).collect(),
        )
        .unwrap()
    }

    fn conv(&mut self, name: &str, role: ParamRole, cin: usize, cout: usize, k: usize, stride: usize) -> ConvLayer {
        let index = self.params.len() as u64;
        let mut rng = match role {
            ParamRole::Head(c) => stream(self.seed, Stream::HeadInit, &[c as u64]),
            ParamRole::Backbone => stream(self.seed, Stream::Init, &[index]),
        };
        let w = self.push(
            format!("{name}.weight"),
            role,
            Self::he_uniform(&[cout, cin, k, k, k], &mut rng),
        );
        let b = self.push(format!("{name}.bias"), role, Tensor::zeros(&[cout]));
        ConvLayer { w, b, stride }
    }

    fn block(&mut self, name: &str, cfg: &NetConfig, cin: usize, cout: usize, stride: usize) -> Block {
        let conv = self.conv(name, ParamRole::Backbone, cin, cout, cfg.kernel_size, stride);
        let norm = (cfg.normalization == Normalization::Instance).then(|| {
            let g = self.push(
                format!("{name}.norm.gamma"),
                ParamRole::Backbone,
                Tensor::filled(&[cout], T::one()),
            );
            let b = self.push(format!("{name}.norm.beta"), ParamRole::Backbone, Tensor::zeros(&[cout]));
            (g, b)
        });
        Block { conv, norm }
    }

    fn head(&mut self, class: usize, cin: usize) -> (usize, usize) {
        let l = self.conv(&format!("head{class}"), ParamRole::Head(class), cin, 1, 1, 1);
        (l.w, l.b)
    }
}

/// Builds the U-Net. Kernels are He-uniform, biases zero, norm scales one.
/// Each parameter draws from its own seeded stream, heads from a per-class
/// stream, so the same seed always gives bit-identical parameters.
pub fn build_unet<T: Element>(config: &NetConfig, seed: u64) -> Result<Network<T>> {
    config.validate()?;
    let mut b = Builder {
        params: Vec::new(),
        seed,
    };
    let mut encoder = Vec::new();
    let mut cin = 1;
    for s in 0..config.stages {
        let cout = config.channels(s);
        let stride = if s == 0 { 1 } else { 2 };
        let b1 = b.block(&format!("enc{s}.conv1"), config, cin, cout, stride);
        let b2 = b.block(&format!("enc{s}.conv2"), config, cout, cout, 1);
        let skip = config.residual_encoder.then(|| {
            (cin != cout || stride != 1)
                .then(|| b.conv(&format!("enc{s}.proj"), ParamRole::Backbone, cin, cout, 1, stride))
        });
        encoder.push(StageLayout { blocks: [b1, b2], skip });
        cin = cout;
    }
    let mut decoder = Vec::new();
    for s in (0..config.stages.saturating_sub(1)).rev() {
        let cout = config.channels(s);
        let b1 = b.block(&format!("dec{s}.conv1"), config, cin + cout, cout, 1);
        let b2 = b.block(&format!("dec{s}.conv2"), config, cout, cout, 1);
        decoder.push(StageLayout {
            blocks: [b1, b2],
            skip: None,
        });
        cin = cout;
    }
    let heads = (0..config.num_global_classes).map(|c| b.head(c, cin)).collect();
    Ok(Network {
        config: config.clone(),
        params: b.params,
        layout: Layout {
            encoder,
            decoder,
            heads,
        },
    })
}

impl<T: Element> Network<T> {
    pub fn num_classes(&self) -> usize {
        self.layout.heads.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Channel count of the feature map the heads read from.
    pub fn head_input_channels(&self) -> usize {
        self.config.channels(0)
    }

    /// Kernel and bias of one class head.
    pub fn head(&self, class: usize) -> (&Parameter<T>, &Parameter<T>) {
        let (w, b) = self.layout.heads[class];
        (&self.params[w], &self.params[b])
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn cast<U: Element>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    role: p.role,
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Replaces all heads with `num_classes` freshly initialized ones; the
    /// backbone is untouched.
    pub fn reinit_heads(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::Config("network needs at least one class".into()));
        }
        let first_head = self.layout.heads.first().map(|h| h.0).unwrap_or(self.params.len());
        self.params.truncate(first_head);
        let cin = self.head_input_channels();
        let mut b = Builder {
            params: std::mem::take(&mut self.params),
            seed,
        };
        self.layout.heads = (0..num_classes).map(|c| b.head(c, cin)).collect();
        self.params = b.params;
        self.config.num_global_classes = num_classes;
        Ok(())
    }

    /// Drops the head of `class`; later classes shift down by one.
    pub fn remove_head(&mut self, class: usize) -> Result<()> {
        if class >= self.num_classes() || self.num_classes() == 1 {
            return Err(Error::Config(format!("cannot remove head {class}")));
        }
        let (w, b) = self.layout.heads.remove(class);
        debug_assert_eq!(b, w + 1);
        self.params.drain(w..=b);
        for (c, h) in self.layout.heads.iter_mut().enumerate() {
            if h.0 > b {
                h.0 -= 2;
                h.1 -= 2;
            }
            self.params[h.0].role = ParamRole::Head(c);
            self.params[h.1].role = ParamRole::Head(c);
        }
        self.config.num_global_classes -= 1;
        Ok(())
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let s = input.shape();
        let want = self.config.tensor_spatial();
        if s.len() != 5 || s[1] != 1 || s[2..] != want {
            return Err(Error::Shape(format!(
                "network input {s:?}, expected [B, 1, {}, {}, {}]",
                want[0], want[1], want[2]
            )));
        }
        Ok(())
    }

    /// Logits `[B, C, Z, Y, X]` for all classes. With a tape, the graph is
    /// recorded for [`Network::backward`].
    pub fn forward(&self, input: &Tensor<T>, tape: Option<&mut Tape<T>>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut local = Tape::new();
        let tape = tape.unwrap_or(&mut local);
        let out = self.record(tape, input.clone())?;
        Ok(tape.value(out).clone())
    }

    /// Records the forward graph on `tape` and returns the logits variable.
    pub fn record(&self, tape: &mut Tape<T>, input: Tensor<T>) -> Result<Var> {
        self.check_input(&input)?;
        let x = tape.leaf(input)?;
        tape.input = Some(x);
        let mut pvars: Vec<Option<Var>> = vec![None; self.params.len()];
        let mut pv = |tape: &mut Tape<T>, i: usize| -> Result<Var> {
            if let Some(v) = pvars[i] {
                return Ok(v);
            }
            let v = tape.param(i, self.params[i].value.clone())?;
            pvars[i] = Some(v);
            Ok(v)
        };
        let slope = self.config.leaky_slope;
        let conv = |tape: &mut Tape<T>,
                    pv: &mut dyn FnMut(&mut Tape<T>, usize) -> Result<Var>,
                    l: ConvLayer,
                    x: Var|
         -> Result<Var> {
            let w = pv(tape, l.w)?;
            let b = pv(tape, l.b)?;
            tape.conv3d(x, w, Some(b), l.stride)
        };
        let block_pre_act = |tape: &mut Tape<T>,
                             pv: &mut dyn FnMut(&mut Tape<T>, usize) -> Result<Var>,
                             bl: &Block,
                             x: Var|
         -> Result<Var> {
            let h = conv(tape, pv, bl.conv, x)?;
            match bl.norm {
                Some((g, b)) => {
                    let g = pv(tape, g)?;
                    let b = pv(tape, b)?;
                    tape.instance_norm(h, Some(g), Some(b), INSTANCE_NORM_EPS)
                }
                None => Ok(h),
            }
        };

        let mut skips = Vec::new();
        let mut h = x;
        for st in &self.layout.encoder {
            let input = h;
            let a = block_pre_act(tape, &mut pv, &st.blocks[0], input)?;
            let a = tape.leaky_relu(a, slope)?;
            let a = block_pre_act(tape, &mut pv, &st.blocks[1], a)?;
            let a = match st.skip {
                None => a,
                Some(None) => tape.add(a, input)?,
                Some(Some(p)) => {
                    let s = conv(tape, &mut pv, p, input)?;
                    tape.add(a, s)?
                }
            };
            h = tape.leaky_relu(a, slope)?;
            skips.push(h);
        }
        skips.pop();
        for st in &self.layout.decoder {
            let up = tape.upsample2(h)?;
            let skip = skips.pop().expect("decoder level without encoder skip");
            let cat = tape.concat(&[up, skip], 1)?;
            let a = block_pre_act(tape, &mut pv, &st.blocks[0], cat)?;
            let a = tape.leaky_relu(a, slope)?;
            let a = block_pre_act(tape, &mut pv, &st.blocks[1], a)?;
            h = tape.leaky_relu(a, slope)?;
        }
        let mut ws = Vec::with_capacity(self.layout.heads.len());
        let mut bs = Vec::with_capacity(self.layout.heads.len());
        for &(w, b) in &self.layout.heads {
            ws.push(pv(tape, w)?);
            bs.push(pv(tape, b)?);
        }
        let w = tape.concat(&ws, 0)?;
        let b = tape.concat(&bs, 0)?;
        let out = tape.conv3d(h, w, Some(b), 1)?;
        tape.output = Some(out);
        Ok(out)
    }

    /// Accumulates dL/dparam into every `Parameter::grad` given dL/dlogits.
    /// Returns the gradient with respect to the network input.
    pub fn backward(&mut self, tape: &Tape<T>, logits_grad: &Tensor<T>) -> Result<Tensor<T>> {
        let out = tape
            .output()
            .ok_or_else(|| Error::Shape("backward on a tape without a recorded forward pass".into()))?;
        let grads = tape.backward(out, logits_grad.clone())?;
        for (i, g) in grads.params() {
            let p = self
                .params
                .get_mut(i)
                .ok_or_else(|| Error::Shape(format!("tape references parameter {i} not in this network")))?;
            if p.grad.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for {} has shape {:?}",
                    p.name,
                    g.shape()
                )));
            }
            p.grad.add_assign(g);
        }
        let input = tape.input().expect("recorded forward sets the input");
        Ok(grads
            .get(input)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(input).shape())))
    }
}
