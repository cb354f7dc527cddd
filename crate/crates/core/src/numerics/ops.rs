//! The differentiable operation set: dense layers, 3×3 convolution, ReLU,
//! elementwise arithmetic, leading-axis concatenation and the masked L1 loss.
//! Interpolation operators live in [`crate::interp`].

use crate::error::{Error, Result};

use super::graph::{BackwardOp, GradSink};
use super::{Graph, Real, Tensor, Var};

fn dim_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Real> Graph<T> {
    /// `y = x · W + b` over the last axis of `x`; `W` is `[D_in, D_out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        let (d_in, d_out) = match *ws {
            [i, o] => (i, o),
            _ => return Err(dim_err("linear", xs, ws)),
        };
        if xs.last() != Some(&d_in) || bs != [d_out] {
            return Err(Error::Dimension(format!(
                "linear: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let rows = self.value(x).len() / d_in;
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = d_out;
        let b = self.value(bias).data();
        let mut out: Vec<T> = (0..rows).flat_map(|_| b.iter().copied()).collect();
        T::gemm(
            rows,
            d_in,
            d_out,
            self.value(x).data(),
            false,
            self.value(weight).data(),
            false,
            &mut out,
            true,
        );
        let value = Tensor::new(out_shape, out)?;
        self.push(
            "linear",
            value,
            &[x, weight, bias],
            Linear {
                x,
                weight,
                bias,
                rows,
                d_in,
                d_out,
            },
        )
    }

    /// Applies a `[C_in, C_out]` dense layer to every pixel of a `[C_in, H, W]`
    /// field (a 1×1 convolution).
    pub fn linear_channels(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(weight), self.shape(bias));
        let (&[c_in, h, w], &[wi, c_out]) = (xs, ws) else {
            return Err(dim_err("linear_channels", xs, ws));
        };
        if wi != c_in || bs != [c_out] {
            return Err(Error::Dimension(format!(
                "linear_channels: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let pixels = h * w;
        let b = self.value(bias).data();
        let mut out: Vec<T> = b
            .iter()
            .flat_map(|&bv| std::iter::repeat_n(bv, pixels))
            .collect();
        T::gemm(
            c_out,
            c_in,
            pixels,
            self.value(weight).data(),
            true,
            self.value(x).data(),
            false,
            &mut out,
            true,
        );
        let value = Tensor::new([c_out, h, w], out)?;
        self.push(
            "linear_channels",
            value,
            &[x, weight, bias],
            LinearChannels {
                x,
                weight,
                bias,
                pixels,
                c_in,
                c_out,
            },
        )
    }

    /// Same-padded (zero fill) 3×3 convolution of a `[C_in, H, W]` field with
    /// `[C_out, C_in, 3, 3]` kernels.
    pub fn conv2d_3x3(&mut self, x: Var, kernels: Var, bias: Var) -> Result<Var> {
        self.conv2d_3x3_padded(x, kernels, bias, Padding::SAME)
    }

    /// 3×3 convolution with one pixel of zero padding on the sides selected
    /// by `pad`; unpadded sides lose one row or column.
    pub fn conv2d_3x3_padded(&mut self, x: Var, kernels: Var, bias: Var, pad: Padding) -> Result<Var> {
        let (xs, ks, bs) = (self.shape(x), self.shape(kernels), self.shape(bias));
        let (&[c_in, h, w], &[c_out, kc, 3, 3]) = (xs, ks) else {
            return Err(dim_err("conv2d_3x3", xs, ks));
        };
        let out_hw = pad.output(h, w);
        if kc != c_in || bs != [c_out] || out_hw.is_none() {
            return Err(Error::Dimension(format!(
                "conv2d_3x3: input {xs:?}, kernels {ks:?}, bias {bs:?}, padding {pad:?}"
            )));
        }
        let (oh, ow) = out_hw.expect("checked above");
        let pixels = oh * ow;
        let cols = im2col(self.value(x).data(), c_in, h, w, pad);
        let b = self.value(bias).data();
        let mut out: Vec<T> = b
            .iter()
            .flat_map(|&bv| std::iter::repeat_n(bv, pixels))
            .collect();
        T::gemm(
            c_out,
            c_in * 9,
            pixels,
            self.value(kernels).data(),
            false,
            &cols,
            false,
            &mut out,
            true,
        );
        let value = Tensor::new([c_out, oh, ow], out)?;
        self.push(
            "conv2d_3x3",
            value,
            &[x, kernels, bias],
            Conv3x3 {
                x,
                kernels,
                bias,
                c_in,
                c_out,
                h,
                w,
                pad,
            },
        )
    }

    /// `x[:, row0..row0+rows, col0..col0+cols]` of a `[C, H, W]` field.
    pub fn crop(&mut self, x: Var, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Var> {
        let xv = self.value(x);
        let [c, h, w] = xv.chw()?;
        let value = xv.crop_chw(row0, col0, rows, cols)?;
        self.push(
            "crop",
            value,
            &[x],
            Crop {
                x,
                c,
                h,
                w,
                row0,
                col0,
                rows,
                cols,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push("relu", value, &[x], Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(av.shape(), data)?;
        self.push("add", value, &[a, b], Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(av.shape(), data)?;
        self.push("mul", value, &[a, b], Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(xv.shape(), data)?;
        self.push("scale", value, &[x], Scale { x, factor })
    }

    /// Concatenates along the leading axis (channels of `[C, H, W]`, rows of
    /// `[N, C]`); all trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let tail = self.shape(first).get(1..).map(<[usize]>::to_vec);
        let Some(tail) = tail else {
            return Err(Error::Dimension("concat needs tensors of rank >= 1".into()));
        };
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.shape().get(1..) != Some(tail.as_slice()) {
                return Err(dim_err("concat", self.shape(first), v.shape()));
            }
            lead += v.shape()[0];
            sizes.push(v.len());
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data)?;
        self.push(
            "concat",
            value,
            parts,
            Concat {
                parts: parts.to_vec(),
                sizes,
            },
        )
    }

    /// `Σ mask·|pred − target| / Σ mask` as a scalar.
    pub fn l1_loss(&mut self, pred: Var, target: Var, mask: Var) -> Result<Var> {
        let (p, t, m) = (self.value(pred), self.value(target), self.value(mask));
        if p.shape() != t.shape() || p.shape() != m.shape() {
            return Err(Error::Dimension(format!(
                "l1_loss: pred {:?}, target {:?}, mask {:?}",
                p.shape(),
                t.shape(),
                m.shape()
            )));
        }
        if m.data().iter().any(|&v| v != T::zero() && v != T::one()) {
            return Err(Error::Input("l1_loss mask must hold only 0 and 1".into()));
        }
        let count: T = m.data().iter().copied().sum();
        if count == T::zero() {
            return Err(Error::DegenerateBatch);
        }
        let total: T = p
            .data()
            .iter()
            .zip(t.data())
            .zip(m.data())
            .map(|((&a, &b), &w)| w * (a - b).abs())
            .sum();
        self.push(
            "l1_loss",
            Tensor::scalar(total / count),
            &[pred, target, mask],
            L1 {
                pred,
                target,
                mask,
                count,
            },
        )
    }
}

/// Which sides of a field receive one pixel of zero padding before a 3×3
/// convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub top: bool,
    pub bottom: bool,
    pub left: bool,
    pub right: bool,
}

impl Padding {
    pub const SAME: Padding = Padding {
        top: true,
        bottom: true,
        left: true,
        right: true,
    };

    /// Output extents for an `h × w` input, `None` when empty.
    pub fn output(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let oh = (h + self.top as usize + self.bottom as usize).checked_sub(2)?;
        let ow = (w + self.left as usize + self.right as usize).checked_sub(2)?;
        (oh > 0 && ow > 0).then_some((oh, ow))
    }
}

/// Visits every `(column row, output row, input row, output column range,
/// input column offset)` of the 3×3 unfolding.
fn for_each_tap(c: usize, h: usize, w: usize, pad: Padding, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
    let (oh, ow) = pad.output(h, w).unwrap_or((0, 0));
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let r = ch * 9 + ky * 3 + kx;
                let dx = kx as isize - pad.left as isize;
                let lo = (-dx).max(0) as usize;
                let hi = (w as isize - dx).clamp(0, ow as isize) as usize;
                if lo >= hi {
                    continue;
                }
                for oy in 0..oh {
                    let sy = oy as isize + ky as isize - pad.top as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    f(r, oy, ch * h + sy as usize, lo, hi, dx);
                }
            }
        }
    }
}

/// Unfolds a `[C, H, W]` field into `[C·9, H_out·W_out]` columns.
pub(crate) fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, pad: Padding) -> Vec<T> {
    let (oh, ow) = pad.output(h, w).unwrap_or((0, 0));
    let pixels = oh * ow;
    let mut cols = vec![T::zero(); c * 9 * pixels];
    for_each_tap(c, h, w, pad, |r, oy, src_row, lo, hi, dx| {
        let src = &x[src_row * w..][..w];
        let dst = &mut cols[r * pixels + oy * ow..][..ow];
        for xo in lo..hi {
            dst[xo] = src[(xo as isize + dx) as usize];
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto the field, accumulating.
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, pad: Padding, dx_out: &mut [T]) {
    let (oh, ow) = pad.output(h, w).unwrap_or((0, 0));
    let pixels = oh * ow;
    for_each_tap(c, h, w, pad, |r, oy, dst_row, lo, hi, dx| {
        let src = &cols[r * pixels + oy * ow..][..ow];
        let dst = &mut dx_out[dst_row * w..][..w];
        for xo in lo..hi {
            dst[(xo as isize + dx) as usize] += src[xo];
        }
    });
}

struct Linear {
    x: Var,
    weight: Var,
    bias: Var,
    rows: usize,
    d_in: usize,
    d_out: usize,
}

impl<T: Real> BackwardOp<T> for Linear {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let (xv, wv) = (sink.value(self.x), sink.value(self.weight));
        if sink.wants(self.weight) {
            let dw = sink.grad_mut(self.weight);
            T::gemm(self.d_in, self.rows, self.d_out, xv.data(), true, g.data(), false, dw, true);
        }
        if sink.wants(self.x) {
            let dx = sink.grad_mut(self.x);
            T::gemm(self.rows, self.d_out, self.d_in, g.data(), false, wv.data(), true, dx, true);
        }
        if sink.wants(self.bias) {
            let db = sink.grad_mut(self.bias);
            for row in g.data().chunks_exact(self.d_out) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
    }
}

struct LinearChannels {
    x: Var,
    weight: Var,
    bias: Var,
    pixels: usize,
    c_in: usize,
    c_out: usize,
}

impl<T: Real> BackwardOp<T> for LinearChannels {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let (xv, wv) = (sink.value(self.x), sink.value(self.weight));
        if sink.wants(self.weight) {
            let dw = sink.grad_mut(self.weight);
            T::gemm(self.c_in, self.pixels, self.c_out, xv.data(), false, g.data(), true, dw, true);
        }
        if sink.wants(self.x) {
            let dx = sink.grad_mut(self.x);
            T::gemm(self.c_in, self.c_out, self.pixels, wv.data(), false, g.data(), false, dx, true);
        }
        if sink.wants(self.bias) {
            let db = sink.grad_mut(self.bias);
            for (d, plane) in db.iter_mut().zip(g.data().chunks_exact(self.pixels)) {
                *d += plane.iter().copied().sum::<T>();
            }
        }
    }
}

struct Conv3x3 {
    x: Var,
    kernels: Var,
    bias: Var,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    pad: Padding,
}

struct Crop {
    x: Var,
    c: usize,
    h: usize,
    w: usize,
    row0: usize,
    col0: usize,
    rows: usize,
    cols: usize,
}

impl<T: Real> BackwardOp<T> for Crop {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let dx = sink.grad_mut(self.x);
        let gd = g.data();
        for ch in 0..self.c {
            for r in 0..self.rows {
                let dst = &mut dx[(ch * self.h + self.row0 + r) * self.w + self.col0..][..self.cols];
                let src = &gd[(ch * self.rows + r) * self.cols..][..self.cols];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

impl<T: Real> BackwardOp<T> for Conv3x3 {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let (oh, ow) = self.pad.output(self.h, self.w).expect("validated at construction");
        let pixels = oh * ow;
        let k = self.c_in * 9;
        if sink.wants(self.kernels) {
            let cols = im2col(sink.value(self.x).data(), self.c_in, self.h, self.w, self.pad);
            let dk = sink.grad_mut(self.kernels);
            T::gemm(self.c_out, pixels, k, g.data(), false, &cols, true, dk, true);
        }
        if sink.wants(self.x) {
            let mut dcols = vec![T::zero(); k * pixels];
            let kv = sink.value(self.kernels);
            T::gemm(k, self.c_out, pixels, kv.data(), true, g.data(), false, &mut dcols, false);
            col2im(&dcols, self.c_in, self.h, self.w, self.pad, sink.grad_mut(self.x));
        }
        if sink.wants(self.bias) {
            let db = sink.grad_mut(self.bias);
            for (d, plane) in db.iter_mut().zip(g.data().chunks_exact(pixels)) {
                *d += plane.iter().copied().sum::<T>();
            }
        }
    }
}

struct Relu {
    x: Var,
}

impl<T: Real> BackwardOp<T> for Relu {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let xv = sink.value(self.x);
        let dx = sink.grad_mut(self.x);
        for ((d, &v), &gv) in dx.iter_mut().zip(xv.data()).zip(g.data()) {
            if v > T::zero() {
                *d += gv;
            }
        }
    }
}

struct Add {
    a: Var,
    b: Var,
}

impl<T: Real> BackwardOp<T> for Add {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        for v in [self.a, self.b] {
            if sink.wants(v) {
                for (d, &gv) in sink.grad_mut(v).iter_mut().zip(g.data()) {
                    *d += gv;
                }
            }
        }
    }
}

struct Mul {
    a: Var,
    b: Var,
}

impl<T: Real> BackwardOp<T> for Mul {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        for (target, other) in [(self.a, self.b), (self.b, self.a)] {
            if sink.wants(target) {
                let ov = sink.value(other);
                let d = sink.grad_mut(target);
                for ((d, &o), &gv) in d.iter_mut().zip(ov.data()).zip(g.data()) {
                    *d += o * gv;
                }
            }
        }
    }
}

struct Scale<T> {
    x: Var,
    factor: T,
}

impl<T: Real> BackwardOp<T> for Scale<T> {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        for (d, &gv) in sink.grad_mut(self.x).iter_mut().zip(g.data()) {
            *d += gv * self.factor;
        }
    }
}

struct Concat {
    parts: Vec<Var>,
    sizes: Vec<usize>,
}

impl<T: Real> BackwardOp<T> for Concat {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let mut offset = 0;
        for (&p, &n) in self.parts.iter().zip(&self.sizes) {
            if sink.wants(p) {
                for (d, &gv) in sink.grad_mut(p).iter_mut().zip(&g.data()[offset..offset + n]) {
                    *d += gv;
                }
            }
            offset += n;
        }
    }
}

struct L1<T> {
    pred: Var,
    target: Var,
    mask: Var,
    count: T,
}

impl<T: Real> BackwardOp<T> for L1<T> {
    fn backward(&self, g: &Tensor<T>, sink: &mut GradSink<'_, T>) {
        let scale = g.data()[0] / self.count;
        let (p, t, m) = (
            sink.value(self.pred),
            sink.value(self.target),
            sink.value(self.mask),
        );
        // Subgradient of |x| at 0 is taken as 0.
        let sign = |a: T, b: T| {
            if a > b {
                T::one()
            } else if a < b {
                -T::one()
            } else {
                T::zero()
            }
        };
        for (var, flip) in [(self.pred, T::one()), (self.target, -T::one())] {
            if sink.wants(var) {
                let d = sink.grad_mut(var);
                for (i, d) in d.iter_mut().enumerate() {
                    *d += flip * scale * m.data()[i] * sign(p.data()[i], t.data()[i]);
                }
            }
        }
    }
}
