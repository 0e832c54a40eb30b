//! Reverse-mode tape over a fixed primitive set.
//!
//! Nodes are appended in execution order, which is a topological order, so
//! backward is a single reverse sweep. Every node keeps its forward value;
//! backward never mutates the tape and may be replayed.

use super::conv::{conv3d_backward, conv3d_forward};
use super::tensor::{Element, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for diagnostics and gradcheck reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrimitiveKind {
    Leaf,
    Param,
    Conv3d,
    Upsample2,
    Concat,
    Add,
    LeakyRelu,
    InstanceNorm,
    Sigmoid,
    Softmax,
    Sum,
    Mean,
}

impl PrimitiveKind {
    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Leaf => "leaf",
            PrimitiveKind::Param => "param",
            PrimitiveKind::Conv3d => "conv3d",
            PrimitiveKind::Upsample2 => "upsample2",
            PrimitiveKind::Concat => "concat",
            PrimitiveKind::Add => "add",
            PrimitiveKind::LeakyRelu => "leaky_relu",
            PrimitiveKind::InstanceNorm => "instance_norm",
            PrimitiveKind::Sigmoid => "sigmoid",
            PrimitiveKind::Softmax => "softmax",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::Mean => "mean",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(usize),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    /// `saved` holds mean and inverse std per (sample, channel).
    InstanceNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Sum {
        x: Var,
        axes: Vec<usize>,
    },
    Mean {
        x: Var,
        axes: Vec<usize>,
    },
}

impl Op {
    fn kind(&self) -> PrimitiveKind {
        match self {
            Op::Leaf => PrimitiveKind::Leaf,
            Op::Param(_) => PrimitiveKind::Param,
            Op::Conv3d { .. } => PrimitiveKind::Conv3d,
            Op::Upsample2 { .. } => PrimitiveKind::Upsample2,
            Op::Concat { .. } => PrimitiveKind::Concat,
            Op::Add { .. } => PrimitiveKind::Add,
            Op::LeakyRelu { .. } => PrimitiveKind::LeakyRelu,
            Op::InstanceNorm { .. } => PrimitiveKind::InstanceNorm,
            Op::Sigmoid { .. } => PrimitiveKind::Sigmoid,
            Op::Softmax { .. } => PrimitiveKind::Softmax,
            Op::Sum { .. } => PrimitiveKind::Sum,
            Op::Mean { .. } => PrimitiveKind::Mean,
        }
    }
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    saved: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    pub(crate) output: Option<Var>,
    pub(crate) input: Option<Var>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// `(parameter index, gradient)` for every parameter node reached.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(p, v)| self.grads[v.0].as_ref().map(|g| (p, g)))
    }
}

fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Output shape and strides for reducing `shape` over `axes`.
fn reduce_plan(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if axes.iter().any(|&a| a >= shape.len()) {
        return Err(Error::Shape(format!(
            "reduction axes {axes:?} out of range for {shape:?}"
        )));
    }
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
    // For each input axis, the stride in the output (0 for reduced axes).
    let mut out_strides = vec![0usize; shape.len()];
    let mut s = 1;
    for &a in kept.iter().rev() {
        out_strides[a] = s;
        s *= shape[a];
    }
    Ok((out_shape, out_strides))
}

fn for_each_reduced(shape: &[usize], out_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    let mut o = 0usize;
    for i in 0..n {
        f(i, o);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            o += out_strides[a];
            if idx[a] < shape[a] {
                break;
            }
            o -= out_strides[a] * shape[a];
            idx[a] = 0;
        }
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            output: None,
            input: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> PrimitiveKind {
        self.nodes[v.0].op.kind()
    }

    /// The variable recorded as the network output by the last forward pass.
    pub fn output(&self) -> Option<Var> {
        self.output
    }

    pub fn input(&self) -> Option<Var> {
        self.input
    }

    fn push(&mut self, op: Op, value: Tensor<T>, saved: Vec<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!(
                "{} node #{}",
                op.kind().name(),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { op, value, saved });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(Op::Leaf, t, vec![])
    }

    pub fn param(&mut self, index: usize, t: Tensor<T>) -> Result<Var> {
        self.push(Op::Param(index), t, vec![])
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let value = conv3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        self.push(Op::Conv3d { x, w, b, stride }, value, vec![])
    }

    /// Nearest-neighbour x2 upsampling of the three trailing axes.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 5 {
            return Err(Error::Shape(format!("upsample2 expects 5-D input, got {s:?}")));
        }
        let (bc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
        let mut out = Tensor::zeros(&[s[0], s[1], 2 * d, 2 * h, 2 * w]);
        {
            let od = out.data_mut();
            let src = xv.data();
            let mut i = 0;
            for c in 0..bc {
                for z in 0..2 * d {
                    for y in 0..2 * h {
                        let row = ((c * d + z / 2) * h + y / 2) * w;
                        for xx in 0..2 * w {
                            od[i] = src[row + xx / 2];
                            i += 1;
                        }
                    }
                }
            }
        }
        self.push(Op::Upsample2 { x }, out, vec![])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?);
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::Shape(format!("concat axis {axis} for rank {rank}")));
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = 0;
        for &v in xs {
            let s = self.value(v).shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!("concat of {:?} and {s:?}", first.shape())));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk: usize = t.shape()[axis..].iter().product();
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::from_vec(&out_shape, data)?;
        self.push(Op::Concat { xs: xs.to_vec(), axis }, out, vec![])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!("add of {:?} and {:?}", av.shape(), bv.shape())));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        self.push(Op::Add { a, b }, out, vec![])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = T::of_f64(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        self.push(Op::LeakyRelu { x, slope }, out, vec![])
    }

    /// Per-sample, per-channel normalization over the spatial axes, with
    /// optional per-channel affine parameters.
    pub fn instance_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        if s.len() < 3 {
            return Err(Error::Shape(format!("instance_norm expects [B, C, ...], got {s:?}")));
        }
        let (b, c) = (s[0], s[1]);
        let n: usize = s[2..].iter().product();
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).shape() != [c] {
                return Err(Error::Shape(format!(
                    "instance_norm affine {:?} for {c} channels",
                    self.value(p).shape()
                )));
            }
        }
        let mut out = Tensor::zeros(&s);
        let mut saved = Vec::with_capacity(2 * b * c);
        for bc in 0..b * c {
            let src = &xv.data()[bc * n..(bc + 1) * n];
            let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            let ch = bc % c;
            let g = gamma.map_or(1.0, |g| self.value(g).data()[ch].as_f64());
            let be = beta.map_or(0.0, |be| self.value(be).data()[ch].as_f64());
            let dst = &mut out.data_mut()[bc * n..(bc + 1) * n];
            for (d, v) in dst.iter_mut().zip(src) {
                *d = T::of_f64(g * (v.as_f64() - mean) * inv_std + be);
            }
            saved.push(T::of_f64(mean));
            saved.push(T::of_f64(inv_std));
        }
        self.push(Op::InstanceNorm { x, gamma, beta }, out, saved)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid { x }, out, vec![])
    }

    /// Softmax over axis 1 of a `[B, C, ...]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("softmax expects [B, C, ...], got {s:?}")));
        }
        let out = Tensor::from_vec(&s, softmax_channels(xv.data(), s[0], s[1], s[2..].iter().product()))?;
        self.push(Op::Softmax { x }, out, vec![])
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.reduce(x, axes, false)?;
        self.push(Op::Sum { x, axes: axes.to_vec() }, out, vec![])
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.reduce(x, axes, true)?;
        self.push(Op::Mean { x, axes: axes.to_vec() }, out, vec![])
    }

    fn reduce(&self, x: Var, axes: &[usize], mean: bool) -> Result<Tensor<T>> {
        let xv = self.value(x);
        let (out_shape, strides) = reduce_plan(xv.shape(), axes)?;
        let mut acc = vec![0.0f64; out_shape.iter().product()];
        for_each_reduced(xv.shape(), &strides, |i, o| acc[o] += xv.data()[i].as_f64());
        let count = (xv.numel() / acc.len().max(1)) as f64;
        Tensor::from_vec(
            &out_shape,
            acc.into_iter()
                .map(|v| T::of_f64(if mean { v / count } else { v }))
                .collect(),
        )
    }

    /// Sign pattern of every leaky-ReLU input: `1` positive, `0` zero, `-1`
    /// negative. Used by gradient checks to drop perturbations that cross a
    /// kink.
    pub fn kink_signature(&self) -> Vec<i8> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::LeakyRelu { x, .. } = node.op {
                sig.extend(self.value(x).data().iter().map(|&v| {
                    if v > T::zero() {
                        1
                    } else if v < T::zero() {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        sig
    }

    /// Reverse sweep from `root` seeded with `seed` (same shape as `root`).
    pub fn backward(&self, root: Var, seed: Tensor<T>) -> Result<Grads<T>> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::Shape(format!(
                "backward seed {:?} for output {:?}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => continue,
                Op::Param(p) => {
                    params.push((*p, Var(i)));
                    continue;
                }
                _ => {}
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(node, &dy, &mut grads)?;
        }
        params.reverse();
        Ok(Grads { grads, params })
    }

    fn backward_node(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut acc = |v: Var, g: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv3d { x, w, b, stride } => {
                let g = conv3d_backward(self.value(*x), self.value(*w), *stride, dy)?;
                acc(*x, g.dx);
                acc(*w, g.dw);
                if let Some(b) = b {
                    acc(*b, g.db);
                }
            }
            Op::Upsample2 { x } => {
                let s = self.value(*x).shape().to_vec();
                let (bc, d, h, w) = (s[0] * s[1], s[2], s[3], s[4]);
                let mut dx = Tensor::zeros(&s);
                let dd = dx.data_mut();
                let mut i = 0;
                for c in 0..bc {
                    for z in 0..2 * d {
                        for y in 0..2 * h {
                            let row = ((c * d + z / 2) * h + y / 2) * w;
                            for xx in 0..2 * w {
                                dd[row + xx / 2] += dy.data()[i];
                                i += 1;
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Concat { xs, axis } => {
                let outer: usize = dy.shape()[..*axis].iter().product();
                let mut parts: Vec<Vec<T>> = xs.iter().map(|v| Vec::with_capacity(self.value(*v).numel())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (k, v) in xs.iter().enumerate() {
                        let chunk: usize = self.value(*v).shape()[*axis..].iter().product();
                        parts[k].extend_from_slice(&dy.data()[off..off + chunk]);
                        off += chunk;
                    }
                }
                for (v, data) in xs.iter().zip(parts) {
                    acc(*v, Tensor::from_vec(self.value(*v).shape(), data)?);
                }
            }
            Op::Add { a, b } => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::LeakyRelu { x, slope } => {
                let s = T::of_f64(*slope);
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| if v > T::zero() { g } else { g * s })
                    .collect();
                acc(*x, Tensor::from_vec(xv.shape(), data)?);
            }
            Op::InstanceNorm { x, gamma, beta } => {
                let xv = self.value(*x);
                let s = xv.shape();
                let (b, c) = (s[0], s[1]);
                let n: usize = s[2..].iter().product();
                let mut dx = Tensor::zeros(s);
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for bc in 0..b * c {
                    let ch = bc % c;
                    let mean = node.saved[2 * bc].as_f64();
                    let inv_std = node.saved[2 * bc + 1].as_f64();
                    let g = gamma.map_or(1.0, |g| self.value(g).data()[ch].as_f64());
                    let xs = &xv.data()[bc * n..(bc + 1) * n];
                    let dys = &dy.data()[bc * n..(bc + 1) * n];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for (&xi, &gi) in xs.iter().zip(dys) {
                        let xhat = (xi.as_f64() - mean) * inv_std;
                        let gi = gi.as_f64();
                        dgamma[ch] += gi * xhat;
                        dbeta[ch] += gi;
                        sum_dxhat += gi * g;
                        sum_dxhat_xhat += gi * g * xhat;
                    }
                    let nf = n as f64;
                    let dst = &mut dx.data_mut()[bc * n..(bc + 1) * n];
                    for ((d, &xi), &gi) in dst.iter_mut().zip(xs).zip(dys) {
                        let xhat = (xi.as_f64() - mean) * inv_std;
                        let dxhat = gi.as_f64() * g;
                        *d = T::of_f64(inv_std / nf * (nf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat));
                    }
                }
                acc(*x, dx);
                if let Some(g) = gamma {
                    acc(*g, Tensor::from_f64(&[c], &dgamma)?);
                }
                if let Some(be) = beta {
                    acc(*be, Tensor::from_f64(&[c], &dbeta)?);
                }
            }
            Op::Sigmoid { x } => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                acc(*x, Tensor::from_vec(node.value.shape(), data)?);
            }
            Op::Softmax { x } => {
                let s = node.value.shape();
                let (b, c) = (s[0], s[1]);
                let n: usize = s[2..].iter().product();
                let y = node.value.data();
                let mut dx = Tensor::zeros(s);
                for bi in 0..b {
                    for v in 0..n {
                        let at = |ch: usize| (bi * c + ch) * n + v;
                        let dot: T = (0..c).map(|ch| dy.data()[at(ch)] * y[at(ch)]).sum();
                        for ch in 0..c {
                            dx.data_mut()[at(ch)] = y[at(ch)] * (dy.data()[at(ch)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Sum { x, axes } | Op::Mean { x, axes } => {
                let xv = self.value(*x);
                let (_, strides) = reduce_plan(xv.shape(), axes)?;
                let scale = match node.op {
                    Op::Mean { .. } => T::of_f64(dy.numel() as f64 / xv.numel() as f64),
                    _ => T::one(),
                };
                let mut dx = Tensor::zeros(xv.shape());
                let dd = dx.data_mut();
                for_each_reduced(xv.shape(), &strides, |i, o| dd[i] = dy.data()[o] * scale);
                acc(*x, dx);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_channels<T: Element>(x: &[T], b: usize, c: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for v in 0..n {
            let at = |ch: usize| (bi * c + ch) * n + v;
            let m = (0..c).map(|ch| x[at(ch)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x[at(ch)] - m).exp();
                out[at(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                out[at(ch)] /= z;
            }
        }
    }
    out
}
