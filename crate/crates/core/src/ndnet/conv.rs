//! 3-D convolution via im2col + GEMM.
//!
//! Layouts: input `[B, Cin, D, H, W]`, weight `[Cout, Cin, k, k, k]`, bias
//! `[Cout]`. Zero padding `(k - 1) / 2` keeps the size at stride 1 and
//! halves even extents at stride 2.

use super::tensor::{Element, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize) -> Result<Self> {
        if x_shape.len() != 5 || w_shape.len() != 5 {
            return Err(Error::Shape(format!(
                "conv3d expects 5-D input and weight, got {x_shape:?} and {w_shape:?}"
            )));
        }
        let k = w_shape[2];
        if k % 2 == 0 || w_shape[3] != k || w_shape[4] != k {
            return Err(Error::Shape(format!(
                "conv3d needs an odd cubic kernel, got {w_shape:?}"
            )));
        }
        if x_shape[1] != w_shape[1] {
            return Err(Error::Shape(format!(
                "conv3d channel mismatch: input {x_shape:?}, weight {w_shape:?}"
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Shape(format!("unsupported stride {stride}")));
        }
        let pad = (k - 1) / 2;
        let in_dims = [x_shape[2], x_shape[3], x_shape[4]];
        let mut out_dims = [0; 3];
        for (o, &n) in out_dims.iter_mut().zip(&in_dims) {
            if n + 2 * pad < k {
                return Err(Error::Shape(format!("input {x_shape:?} smaller than kernel")));
            }
            *o = (n + 2 * pad - k) / stride + 1;
        }
        Ok(ConvGeom {
            cin: x_shape[1],
            cout: w_shape[0],
            k,
            stride,
            pad,
            in_dims,
            out_dims,
        })
    }

    fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    /// 1x1x1 stride-1 convolutions read the input directly as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// For kernel offset `o` along one axis: input index for output index `i`.
    #[inline]
    fn src(&self, i: usize, o: usize, n: usize) -> Option<usize> {
        let v = (i * self.stride + o) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < n).then_some(v as usize)
    }

    /// Output indices `lo..hi` whose source index for kernel offset `o` lies
    /// inside an axis of length `n`.
    #[inline]
    fn valid(&self, o: usize, n: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > o { (self.pad - o).div_ceil(s) } else { 0 };
        let hi = if n + self.pad > o {
            (n + self.pad - o - 1) / s + 1
        } else {
            0
        };
        (lo.min(out), hi.min(out).max(lo.min(out)))
    }

    fn im2col<T: Element>(&self, x: &[T], col: &mut [T]) {
        let [d, h, w] = self.in_dims;
        let [od, oh, ow] = self.out_dims;
        let (k, st) = (self.k, self.stride);
        let n_out = self.out_len();
        for ci in 0..self.cin {
            let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
            for a in 0..k {
                for b in 0..k {
                    for c in 0..k {
                        let r = ((ci * k + a) * k + b) * k + c;
                        let row = &mut col[r * n_out..(r + 1) * n_out];
                        let (xlo, xhi) = self.valid(c, w, ow);
                        let first = (xlo * st + c) as isize - self.pad as isize;
                        for z in 0..od {
                            let sz = self.src(z, a, d);
                            for y in 0..oh {
                                let out = &mut row[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                                let Some((sz, sy)) = sz.zip(self.src(y, b, h)) else {
                                    out.fill(T::zero());
                                    continue;
                                };
                                out[..xlo].fill(T::zero());
                                out[xhi..].fill(T::zero());
                                if xhi > xlo {
                                    let start = (sz * h + sy) * w + first as usize;
                                    if st == 1 {
                                        out[xlo..xhi].copy_from_slice(&xc[start..start + (xhi - xlo)]);
                                    } else {
                                        for (i, v) in out[xlo..xhi].iter_mut().enumerate() {
                                            *v = xc[start + i * st];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, col: &[T], dx: &mut [T]) {
        let [d, h, w] = self.in_dims;
        let [od, oh, ow] = self.out_dims;
        let (k, st) = (self.k, self.stride);
        let n_out = self.out_len();
        for ci in 0..self.cin {
            let dxc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
            for a in 0..k {
                for b in 0..k {
                    for c in 0..k {
                        let r = ((ci * k + a) * k + b) * k + c;
                        let row = &col[r * n_out..(r + 1) * n_out];
                        let (xlo, xhi) = self.valid(c, w, ow);
                        if xhi == xlo {
                            continue;
                        }
                        let first = ((xlo * st + c) as isize - self.pad as isize) as usize;
                        for z in 0..od {
                            let Some(sz) = self.src(z, a, d) else { continue };
                            for y in 0..oh {
                                let Some(sy) = self.src(y, b, h) else { continue };
                                let src = &row[(z * oh + y) * ow + xlo..(z * oh + y) * ow + xhi];
                                let start = (sz * h + sy) * w + first;
                                if st == 1 {
                                    for (t, v) in dxc[start..start + src.len()].iter_mut().zip(src) {
                                        *t += *v;
                                    }
                                } else {
                                    for (i, v) in src.iter().enumerate() {
                                        dxc[start + i * st] += *v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::Shape(format!(
                "conv3d bias {:?} for {} outputs",
                b.shape(),
                g.cout
            )));
        }
    }
    let batch = x.shape()[0];
    let (in_len, out_len, rows) = (g.in_len(), g.out_len(), g.rows());
    let mut out = Tensor::zeros(&[batch, g.cout, g.out_dims[0], g.out_dims[1], g.out_dims[2]]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * out_len]
    };
    for s in 0..batch {
        let xs = &x.data()[s * g.cin * in_len..(s + 1) * g.cin * in_len];
        let ys = &mut out.data_mut()[s * g.cout * out_len..(s + 1) * g.cout * out_len];
        let colm: &[T] = if g.is_pointwise() {
            xs
        } else {
            g.im2col(xs, &mut col);
            &col
        };
        T::gemm(g.cout, rows, out_len, w.data(), false, colm, false, T::zero(), ys);
        if let Some(b) = bias {
            for (co, chunk) in ys.chunks_exact_mut(out_len).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

pub(crate) struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub(crate) fn conv3d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride)?;
    let batch = x.shape()[0];
    let (in_len, out_len, rows) = (g.in_len(), g.out_len(), g.rows());
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[g.cout]);
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * out_len]
    };
    let mut dcol = vec![T::zero(); rows * out_len];
    for s in 0..batch {
        let xs = &x.data()[s * g.cin * in_len..(s + 1) * g.cin * in_len];
        let dys = &dy.data()[s * g.cout * out_len..(s + 1) * g.cout * out_len];
        let colm: &[T] = if g.is_pointwise() {
            xs
        } else {
            g.im2col(xs, &mut col);
            &col
        };
        // dW += dY * col^T
        T::gemm(g.cout, out_len, rows, dys, false, colm, true, T::one(), dw.data_mut());
        for (co, chunk) in dys.chunks_exact(out_len).enumerate() {
            db.data_mut()[co] += chunk.iter().copied().sum::<T>();
        }
        // dcol = W^T * dY
        let dxs = &mut dx.data_mut()[s * g.cin * in_len..(s + 1) * g.cin * in_len];
        if g.is_pointwise() {
            T::gemm(rows, g.cout, out_len, w.data(), true, dys, false, T::zero(), dxs);
        } else {
            T::gemm(rows, g.cout, out_len, w.data(), true, dys, false, T::zero(), &mut dcol);
            g.col2im(&dcol, dxs);
        }
    }
    Ok(ConvGrads { dx, dw, db })
}
