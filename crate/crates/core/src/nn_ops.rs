//! Spatial primitives with backward rules: same-padded stride-1
//! convolution and its transpose (im2col + GEMM), 2x2 max pooling,
//! nearest-neighbour 2x upsampling, channel slicing, and orthogonal
//! initialisation.

use std::rc::Rc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor::tape::Op;
use crate::tensor::{dims4, gemm, Element, Rng, Tape, Tensor, Var};

/// Convolution weights `[out_ch, in_ch, k, k]` and bias `[out_ch]`.
///
/// When used as a transposed convolution the weight roles flip: the tensor
/// is `[in_ch, out_ch, k, k]` and the bias has `out_ch` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<P> {
    pub weight: P,
    pub bias: P,
}

impl<T: Element> ConvKernel<Tensor<T>> {
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize) -> Self {
        ConvKernel {
            weight: Tensor::zeros(&[out_ch, in_ch, k, k]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }
}

/// `conv2d` with a kernel's weight and bias.
pub fn conv2d<T: Element>(tape: &Tape<T>, x: &Var<T>, k: &ConvKernel<Var<T>>) -> Result<Var<T>> {
    tape.conv2d(x, &k.weight, Some(&k.bias))
}

/// Transposed counterpart of [`conv2d`].
pub fn conv2d_transpose<T: Element>(
    tape: &Tape<T>,
    x: &Var<T>,
    k: &ConvKernel<Var<T>>,
) -> Result<Var<T>> {
    tape.conv_transpose2d(x, &k.weight, Some(&k.bias))
}

impl<T: Element> Tape<T> {
    /// Stride-1 cross-correlation with zero padding `(k - 1) / 2`.
    pub fn conv2d(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let value = conv2d_forward(x.value(), w.value(), b.map(Var::value))?;
        Ok(self.record_conv(x, w, b, value, false))
    }

    /// Adjoint of [`Tape::conv2d`] with respect to its input, plus bias.
    pub fn conv_transpose2d(&self, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
        let value = conv_transpose2d_forward(x.value(), w.value(), b.map(Var::value))?;
        Ok(self.record_conv(x, w, b, value, true))
    }

    fn record_conv(
        &self,
        x: &Var<T>,
        w: &Var<T>,
        b: Option<&Var<T>>,
        value: Tensor<T>,
        transpose: bool,
    ) -> Var<T> {
        let bid = b.and_then(Var::node);
        let (xid, wid) = (x.node(), w.node());
        if xid.is_none() && wid.is_none() && bid.is_none() {
            return Var::constant(value);
        }
        let (xv, wv) = (x.rc(), w.rc());
        let op = if transpose {
            Op::ConvTranspose2d {
                x: xid,
                w: wid,
                b: bid,
                xv,
                wv,
            }
        } else {
            Op::Conv2d {
                x: xid,
                w: wid,
                b: bid,
                xv,
                wv,
            }
        };
        self.record(op, Rc::new(value))
    }

    /// 2x2 max pooling with stride 2. Ties route to the first element in
    /// row-major order.
    pub fn maxpool2(&self, x: &Var<T>) -> Result<Var<T>> {
        let (value, argmax) = maxpool2_forward(x.value())?;
        Ok(self.unary(x, value, |x, _| Op::MaxPool2 { x, argmax }))
    }

    /// Replicate each pixel into a 2x2 block.
    pub fn upsample2(&self, x: &Var<T>) -> Result<Var<T>> {
        let value = upsample2_forward(x.value())?;
        Ok(self.unary(x, value, |x, _| Op::Upsample2 { x }))
    }
}

fn check_kernel(op: &'static str, w: &Tensor<impl Element>) -> Result<(usize, usize, usize)> {
    let (o, i, kh, kw) = dims4(op, w.shape())?;
    if kh != kw || kh % 2 == 0 {
        return Err(Error::invalid(format!(
            "{op}: kernel must be square with odd extent, got {kh}x{kw}"
        )));
    }
    Ok((o, i, kh))
}

fn check_bias<T: Element>(op: &'static str, b: Option<&Tensor<T>>, n: usize) -> Result<()> {
    if let Some(b) = b {
        if b.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op,
                left: b.shape().to_vec(),
                right: vec![n],
            });
        }
    }
    Ok(())
}

/// Unfold same-padded `k x k` patches of `x` into `col` rows
/// `(c * k + ky) * k + kx`; item `bi` occupies columns `bi * h * w ..`.
fn im2col<T: Element>(x: &[T], bn: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let n = bn * hw;
    let pad = (k - 1) / 2;
    let mut col = vec![T::zero(); c * k * k * n];
    for bi in 0..bn {
        for ci in 0..c {
            let plane = &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * n + bi * hw..row * n + (bi + 1) * hw];
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad).saturating_sub(kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for oy in 0..h {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let src_row = (iy - pad) * w;
                        let src = &plane[src_row + x_lo + kx - pad..src_row + x_hi + kx - pad];
                        dst[oy * w + x_lo..oy * w + x_hi].copy_from_slice(src);
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-add patch rows back into an image batch.
fn col2im<T: Element>(col: &[T], bn: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let n = bn * hw;
    let pad = (k - 1) / 2;
    let mut x = vec![T::zero(); bn * c * hw];
    for bi in 0..bn {
        for ci in 0..c {
            let plane = &mut x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * n + bi * hw..row * n + (bi + 1) * hw];
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad).saturating_sub(kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for oy in 0..h {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let dst_row = (iy - pad) * w;
                        let dst = &mut plane[dst_row + x_lo + kx - pad..dst_row + x_hi + kx - pad];
                        for (d, &s) in dst.iter_mut().zip(&src[oy * w + x_lo..oy * w + x_hi]) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[b, c, hw]` -> `[c, b * hw]`.
fn to_channel_major<T: Element>(x: &[T], bn: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..bn {
        for ci in 0..c {
            out[ci * bn * hw + bi * hw..ci * bn * hw + (bi + 1) * hw]
                .copy_from_slice(&x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]);
        }
    }
    out
}

/// `[c, b * hw]` -> `[b, c, hw]`, adding `bias[c]` when given.
fn from_channel_major<T: Element>(
    m: &[T],
    bn: usize,
    c: usize,
    hw: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut out = vec![T::zero(); m.len()];
    for bi in 0..bn {
        for ci in 0..c {
            let src = &m[ci * bn * hw + bi * hw..ci * bn * hw + (bi + 1) * hw];
            let dst = &mut out[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            match bias {
                Some(b) => {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s + b[ci];
                    }
                }
                None => dst.copy_from_slice(src),
            }
        }
    }
    out
}

fn channel_sums<T: Element>(g: &[T], bn: usize, c: usize, hw: usize) -> Tensor<T> {
    Tensor::from_fn(&[c], |ci| {
        (0..bn)
            .map(|bi| g[(bi * c + ci) * hw..(bi * c + ci + 1) * hw].iter().copied().sum::<T>())
            .sum()
    })
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (bn, cin, h, wd) = dims4("conv2d", x.shape())?;
    let (cout, wcin, k) = check_kernel("conv2d", w)?;
    if wcin != cin {
        return Err(Error::ChannelMismatch {
            op: "conv2d",
            expected: wcin,
            actual: cin,
        });
    }
    check_bias("conv2d", b, cout)?;
    let hw = h * wd;
    let (kk, n) = (cin * k * k, bn * hw);
    let col = im2col(x.data(), bn, cin, h, wd, k);
    let mut tmp = vec![T::zero(); cout * n];
    gemm(cout, kk, n, w.data(), false, &col, false, &mut tmp, false);
    let out = from_channel_major(&tmp, bn, cout, hw, b.map(Tensor::data));
    Ok(Tensor::from_parts(vec![bn, cout, h, wd], out))
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>);

pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> ConvGrads<T> {
    let (bn, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let hw = h * wd;
    let (kk, n) = (cin * k * k, bn * hw);
    let gm = to_channel_major(g.data(), bn, cout, hw);
    let dw = need_w.then(|| {
        let col = im2col(x.data(), bn, cin, h, wd, k);
        let mut dw = vec![T::zero(); cout * kk];
        gemm(cout, n, kk, &gm, false, &col, true, &mut dw, false);
        Tensor::from_parts(w.shape().to_vec(), dw)
    });
    let dx = need_x.then(|| {
        let mut dcol = vec![T::zero(); kk * n];
        gemm(kk, cout, n, w.data(), true, &gm, false, &mut dcol, false);
        Tensor::from_parts(x.shape().to_vec(), col2im(&dcol, bn, cin, h, wd, k))
    });
    (dx, dw, channel_sums(g.data(), bn, cout, hw))
}

pub(crate) fn conv_transpose2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (bn, cin, h, wd) = dims4("conv2d_transpose", x.shape())?;
    let (wcin, cout, k) = check_kernel("conv2d_transpose", w)?;
    if wcin != cin {
        return Err(Error::ChannelMismatch {
            op: "conv2d_transpose",
            expected: wcin,
            actual: cin,
        });
    }
    check_bias("conv2d_transpose", b, cout)?;
    let hw = h * wd;
    let (kk, n) = (cout * k * k, bn * hw);
    let xm = to_channel_major(x.data(), bn, cin, hw);
    let mut col = vec![T::zero(); kk * n];
    gemm(kk, cin, n, w.data(), true, &xm, false, &mut col, false);
    let mut out = col2im(&col, bn, cout, h, wd, k);
    if let Some(b) = b {
        for (plane, chunk) in out.chunks_mut(hw).enumerate() {
            let bias = b.data()[plane % cout];
            for v in chunk {
                *v = *v + bias;
            }
        }
    }
    Ok(Tensor::from_parts(vec![bn, cout, h, wd], out))
}

pub(crate) fn conv_transpose2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> ConvGrads<T> {
    let (bn, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[1], w.shape()[2]);
    let hw = h * wd;
    let (kk, n) = (cout * k * k, bn * hw);
    let gcol = im2col(g.data(), bn, cout, h, wd, k);
    let dx = need_x.then(|| {
        let mut dxm = vec![T::zero(); cin * n];
        gemm(cin, kk, n, w.data(), false, &gcol, false, &mut dxm, false);
        Tensor::from_parts(x.shape().to_vec(), from_channel_major(&dxm, bn, cin, hw, None))
    });
    let dw = need_w.then(|| {
        let xm = to_channel_major(x.data(), bn, cin, hw);
        let mut dw = vec![T::zero(); cin * kk];
        gemm(cin, n, kk, &xm, false, &gcol, true, &mut dw, false);
        Tensor::from_parts(w.shape().to_vec(), dw)
    });
    (dx, dw, channel_sums(g.data(), bn, cout, hw))
}

pub(crate) fn maxpool2_forward<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (bn, c, h, w) = dims4("maxpool2", x.shape())?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::OddExtent {
            op: "maxpool2",
            shape: x.shape().to_vec(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(bn * c * oh * ow);
    let mut argmax = Vec::with_capacity(bn * c * oh * ow);
    for plane in 0..bn * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(vec![bn, c, oh, ow], out), argmax))
}

pub(crate) fn upsample2_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (bn, c, h, w) = dims4("upsample_nearest2", x.shape())?;
    let (oh, ow) = (2 * h, 2 * w);
    let src = x.data();
    let mut out = vec![T::zero(); bn * c * oh * ow];
    for plane in 0..bn * c {
        for oy in 0..oh {
            let row = &src[plane * h * w + (oy / 2) * w..plane * h * w + (oy / 2 + 1) * w];
            let dst = &mut out[plane * oh * ow + oy * ow..plane * oh * ow + (oy + 1) * ow];
            for (ox, d) in dst.iter_mut().enumerate() {
                *d = row[ox / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![bn, c, oh, ow], out))
}

pub(crate) fn upsample2_backward<T: Element>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let planes = in_shape[0] * in_shape[1];
    let mut dx = vec![T::zero(); planes * h * w];
    for plane in 0..planes {
        for oy in 0..oh {
            for ox in 0..ow {
                let d = &mut dx[plane * h * w + (oy / 2) * w + ox / 2];
                *d = *d + g.data()[plane * oh * ow + oy * ow + ox];
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

pub(crate) fn narrow_forward<T: Element>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || len == 0 || start + len > shape[axis] {
        return Err(Error::invalid(format!(
            "narrow: range {start}..{} on axis {axis} out of bounds for {shape:?}",
            start + len
        )));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * shape[axis] + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = len;
    Ok(Tensor::from_parts(new_shape, out))
}

pub(crate) fn narrow_backward<T: Element>(
    g: &Tensor<T>,
    in_shape: &[usize],
    axis: usize,
    start: usize,
) -> Tensor<T> {
    let len = g.shape()[axis];
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let mut dx = Tensor::zeros(in_shape);
    for o in 0..outer {
        let base = (o * in_shape[axis] + start) * inner;
        dx.data_mut()[base..base + len * inner]
            .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    dx
}

/// Random matrix with orthonormal columns (`rows >= cols`) or rows
/// (`rows < cols`), from the sign-corrected QR factorisation of a Gaussian
/// matrix.
pub fn orthogonal_init<T: Element>(rows: usize, cols: usize, rng: &mut Rng) -> Result<Tensor<T>> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("orthogonal_init needs positive extents"));
    }
    let (tall, thin) = (rows.max(cols), rows.min(cols));
    let gauss: Vec<f64> = (0..tall * thin).map(|_| rng.normal()).collect();
    let qr = DMatrix::from_row_slice(tall, thin, &gauss).qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..thin {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let data = if rows >= cols {
        (0..rows * cols).map(|i| T::from_f64(q[(i / cols, i % cols)])).collect()
    } else {
        (0..rows * cols).map(|i| T::from_f64(q[(i % cols, i / cols)])).collect()
    };
    Ok(Tensor::from_parts(vec![rows, cols], data))
}

/// Fill a `[out, in, k, k]` (or any rank >= 2) kernel from an orthogonal
/// `[out, in * k * k]` matrix.
pub fn orthogonal_kernel<T: Element>(shape: &[usize], rng: &mut Rng) -> Result<Tensor<T>> {
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    orthogonal_init::<T>(rows, cols, rng)?.reshape(shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: [usize; 4], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct nested-loop same-padded cross-correlation.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64]) -> Tensor<f64> {
        let (bn, cin, h, wd) = dims4("t", x.shape()).unwrap();
        let (cout, _, k, _) = dims4("t", w.shape()).unwrap();
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(&[bn, cout, h, wd]);
        for bi in 0..bn {
            for o in 0..cout {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut s = b[o];
                        for i in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - pad;
                                    let ix = xx as isize + kx as isize - pad;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    s += w.data()[((o * cin + i) * k + ky) * k + kx]
                                        * x.data()[((bi * cin + i) * h + iy as usize) * wd
                                            + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((bi * cout + o) * h + y) * wd + xx] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_of_ones_counts_covered_taps() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d_forward(&x, &w, None).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
        assert_eq!(y, naive_conv(&x, &w, &[0.0]));
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = Rng::new(21);
        let x = Tensor::randn(&[2, 3, 5, 6], &mut rng);
        let w = Tensor::randn(&[4, 3, 3, 3], &mut rng);
        let b = Tensor::randn(&[4], &mut rng);
        let fast = conv2d_forward(&x, &w, Some(&b)).unwrap();
        let slow = naive_conv(&x, &w, b.data());
        for (a, e) in fast.data().iter().zip(slow.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_and_bias_only_kernels() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::randn(&[2, 1, 4, 4], &mut rng);
        let one = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d_forward(&x, &one, Some(&Tensor::zeros(&[1]))).unwrap(), x);
        assert_eq!(conv_transpose2d_forward(&x, &one, None).unwrap(), x);

        let zero_w = Tensor::zeros(&[2, 1, 3, 3]);
        let bias = Tensor::new(vec![2], vec![0.25, -1.5]).unwrap();
        let y = conv2d_forward(&x, &zero_w, Some(&bias)).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, if (i / 16) % 2 == 0 { 0.25 } else { -1.5 });
        }
        let zero_x = Tensor::zeros(&[1, 2, 3, 3]);
        let wt = Tensor::randn(&[2, 1, 3, 3], &mut rng);
        let y = conv_transpose2d_forward(&zero_x, &wt, Some(&Tensor::full(&[1], 0.5))).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        let mut rng = Rng::new(99);
        for k in [1, 3, 5] {
            let x = Tensor::<f64>::randn(&[2, 3, 6, 5], &mut rng);
            let w = Tensor::randn(&[4, 3, k, k], &mut rng);
            let y = Tensor::randn(&[2, 4, 6, 5], &mut rng);
            let lhs = conv2d_forward(&x, &w, None).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&conv_transpose2d_forward(&y, &w, None).unwrap()).unwrap();
            assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn channel_mismatch_reports_counts() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        match conv2d_forward(&x, &w, None) {
            Err(Error::ChannelMismatch {
                expected, actual, ..
            }) => assert_eq!((expected, actual), (3, 2)),
            other => panic!("{other:?}"),
        }
        let even = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(conv2d_forward(&x, &even, None).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t4([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.maxpool2(&x).unwrap();
        assert_eq!(y.value().data(), &[4.0]);
        let g = tape.backward(&tape.sum(&y)).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);

        let c = Tensor::<f64>::full(&[1, 2, 4, 4], 0.3);
        let (p, _) = maxpool2_forward(&c).unwrap();
        assert_eq!(p, Tensor::full(&[1, 2, 2, 2], 0.3));

        // ties route to the first element in scan order
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t4([1, 1, 2, 2], &[5.0, 5.0, 5.0, 5.0]));
        let g = tape.backward(&tape.sum(&tape.maxpool2(&x).unwrap())).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);

        let odd = Tensor::<f32>::zeros(&[1, 1, 3, 4]);
        assert!(matches!(maxpool2_forward(&odd), Err(Error::OddExtent { .. })));
    }

    #[test]
    fn upsample_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t4([1, 1, 1, 1], &[4.0]));
        let y = tape.upsample2(&x).unwrap();
        assert_eq!(y.value().data(), &[4.0; 4]);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        let mut rng = Rng::new(2);
        let x = tape.leaf(Tensor::randn(&[2, 3, 3, 2], &mut rng));
        let up = tape.upsample2(&x).unwrap();
        let g = tape.backward(&tape.sum(&up)).unwrap();
        assert!(g.get(&x).unwrap().data().iter().all(|&v| v == 4.0));
        assert_eq!(tape.maxpool2(&up).unwrap().value(), x.value());
    }

    #[test]
    fn narrow_slices_and_scatters() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 2], |i| i as f64);
        let y = narrow_forward(&x, 1, 1, 2).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert_eq!(y.data(), &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]);
        let dx = narrow_backward(&y, x.shape(), 1, 1);
        assert_eq!(dx.data(), &[0.0, 0.0, 2.0, 3.0, 4.0, 5.0, 0.0, 0.0, 8.0, 9.0, 10.0, 11.0]);
        assert!(narrow_forward(&x, 1, 2, 2).is_err());
    }

    fn gram_error(w: &Tensor<f64>, rows: usize, cols: usize) -> f64 {
        let (outer, inner, by_cols) = if cols <= rows {
            (cols, rows, true)
        } else {
            (rows, cols, false)
        };
        let at = |i: usize, j: usize| w.data()[i * cols + j];
        let mut worst = 0.0f64;
        for a in 0..outer {
            for b in 0..outer {
                let s: f64 = (0..inner)
                    .map(|p| {
                        if by_cols {
                            at(p, a) * at(p, b)
                        } else {
                            at(a, p) * at(b, p)
                        }
                    })
                    .sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((s - target).abs());
            }
        }
        worst
    }

    #[test]
    fn orthogonal_init_examples() {
        let mut rng = Rng::new(4);
        for (r, c) in [(4, 4), (8, 3), (3, 8), (1, 1), (16, 72)] {
            let w = orthogonal_init::<f64>(r, c, &mut rng).unwrap();
            assert!(gram_error(&w, r, c) <= 1e-5, "({r},{c})");
        }
        let w = orthogonal_init::<f64>(1, 1, &mut rng).unwrap();
        assert_eq!(w.data()[0].abs(), 1.0);
        assert!(orthogonal_init::<f32>(0, 3, &mut rng).is_err());
    }

    #[test]
    fn orthogonal_init_is_seed_deterministic() {
        let a = orthogonal_init::<f32>(6, 4, &mut Rng::new(9)).unwrap();
        let b = orthogonal_init::<f32>(6, 4, &mut Rng::new(9)).unwrap();
        let c = orthogonal_init::<f32>(6, 4, &mut Rng::new(10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
