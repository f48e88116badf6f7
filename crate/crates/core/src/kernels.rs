//! Forward and backward kernels for every layer kind.
//!
//! Kernels are plain functions over [`Tensor`] values; the autodiff graph in
//! [`crate::graph`] records which kernel produced each node and calls the
//! matching backward here. Batch items are processed through [`crate::par`],
//! and every cross-batch reduction is summed in batch order afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Output extent and leading pad for one spatial axis.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    if kernel == 0 || stride == 0 || input == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if kernel > input {
                None
            } else {
                Some(((input - kernel) / stride + 1, 0))
            }
        }
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<[usize; 4]> {
    match *t.shape() {
        [b, h, w, c] => Ok([b, h, w, c]),
        ref s => Err(Error::shape(op, format!("expected a (batch, height, width, channels) tensor, got {s:?}"))),
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<[usize; 2]> {
    match *t.shape() {
        [b, f] => Ok([b, f]),
        ref s => Err(Error::shape(op, format!("expected a (batch, features) tensor, got {s:?}"))),
    }
}

/// `c = alpha * a * b + beta * c` on strided row-major views.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access inside the slices,
    // and `c` is a unique borrow laid out as a dense row-major m x n block.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one convolution or pooling window sweep.
#[derive(Clone, Copy, Debug)]
struct Window {
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Window {
    fn new(op: &'static str, h: usize, w: usize, c: usize, k: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::shape(op, format!("kernel {k} and stride {stride} must be positive")));
        }
        let (out_h, pad_top) = output_extent(h, k, stride, padding)
            .ok_or_else(|| Error::shape(op, format!("height {h} is smaller than kernel {k}")))?;
        let (out_w, pad_left) = output_extent(w, k, stride, padding)
            .ok_or_else(|| Error::shape(op, format!("width {w} is smaller than kernel {k}")))?;
        Ok(Self {
            h,
            w,
            c,
            k,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output `o` and kernel offset `d`, if not padding.
    #[inline]
    fn src(&self, o: usize, d: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * self.stride + d).checked_sub(pad).filter(|&i| i < extent)
    }

    /// Unfolds one image (h, w, c) into rows of patches (positions, k*k*c).
    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let pl = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &mut col[(oy * self.out_w + ox) * pl..][..pl];
                for ky in 0..self.k {
                    let dst = &mut row[ky * self.k * self.c..][..self.k * self.c];
                    let Some(iy) = self.src(oy, ky, self.pad_top, self.h) else {
                        dst.fill(0.0);
                        continue;
                    };
                    for kx in 0..self.k {
                        let d = &mut dst[kx * self.c..][..self.c];
                        match self.src(ox, kx, self.pad_left, self.w) {
                            Some(ix) => d.copy_from_slice(&x[(iy * self.w + ix) * self.c..][..self.c]),
                            None => d.fill(0.0),
                        }
                    }
                }
            }
        }
    }

    /// Scatters patch rows back onto an image, accumulating overlaps.
    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let pl = self.patch_len();
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let row = &col[(oy * self.out_w + ox) * pl..][..pl];
                for ky in 0..self.k {
                    let Some(iy) = self.src(oy, ky, self.pad_top, self.h) else {
                        continue;
                    };
                    for kx in 0..self.k {
                        if let Some(ix) = self.src(ox, kx, self.pad_left, self.w) {
                            let dst = &mut x[(iy * self.w + ix) * self.c..][..self.c];
                            let src = &row[(ky * self.k + kx) * self.c..][..self.c];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: Padding) -> Result<(Window, usize, usize)> {
    let [batch, h, wd, cin] = dims4(x, "conv2d")?;
    let (k, cout) = match *w.shape() {
        [k1, k2, wc, co] if k1 == k2 => {
            if wc != cin {
                return Err(Error::shape(
                    "conv2d",
                    format!("input channels {cin} do not match kernel input channels {wc}"),
                ));
            }
            (k1, co)
        }
        ref s => {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be (k, k, in_channels, out_channels), got {s:?}"),
            ))
        }
    };
    if b.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match out channels {cout}", b.shape()),
        ));
    }
    Ok((Window::new("conv2d", h, wd, cin, k, stride, padding)?, batch, cout))
}

/// Cross-correlation of `x` (B,H,W,Cin) with `w` (k,k,Cin,Cout) plus bias.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    conv2d_with(par::kernel_execution(), x, w, b, stride, padding)
}

/// [`conv2d`] under an explicit scheduling mode.
pub fn conv2d_with(exec: Execution, x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (g, batch, cout) = conv_geometry(x, w, b, stride, padding)?;
    let (p, kl) = (g.positions(), g.patch_len());
    let in_len = g.h * g.w * g.c;
    let mut out = vec![0.0; batch * p * cout];
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    par::for_each_chunk_mut(exec, &mut out, p * cout, |i, o| {
        for row in o.chunks_exact_mut(cout) {
            row.copy_from_slice(bd);
        }
        let xi = &xd[i * in_len..][..in_len];
        if g.is_pointwise() {
            gemm(p, kl, cout, xi, (kl, 1), wd, (cout, 1), o, 1.0);
        } else {
            let mut col = vec![0.0; p * kl];
            g.im2col(xi, &mut col);
            gemm(p, kl, cout, &col, (kl, 1), wd, (cout, 1), o, 1.0);
        }
    });
    Tensor::new(&[batch, g.out_h, g.out_w, cout], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    padding: Padding,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (g, batch, cout) = conv_geometry(x, w, b, stride, padding)?;
    let (p, kl) = (g.positions(), g.patch_len());
    let in_len = g.h * g.w * g.c;
    if dy.shape() != [batch, g.out_h, g.out_w, cout] {
        return Err(Error::shape("conv2d_backward", format!("upstream gradient {:?}", dy.shape())));
    }
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let parts = par::map_indices(par::kernel_execution(), batch, |i| {
        let xi = &xd[i * in_len..][..in_len];
        let dyi = &dyd[i * p * cout..][..p * cout];
        let mut dw = vec![0.0; kl * cout];
        let mut dx = vec![0.0; in_len];
        if g.is_pointwise() {
            gemm(kl, p, cout, xi, (1, kl), dyi, (cout, 1), &mut dw, 0.0);
            gemm(p, cout, kl, dyi, (cout, 1), wd, (1, cout), &mut dx, 0.0);
        } else {
            let mut col = vec![0.0; p * kl];
            g.im2col(xi, &mut col);
            gemm(kl, p, cout, &col, (1, kl), dyi, (cout, 1), &mut dw, 0.0);
            gemm(p, cout, kl, dyi, (cout, 1), wd, (1, cout), &mut col, 0.0);
            g.col2im(&col, &mut dx);
        }
        (dx, dw)
    });
    let mut dx = Vec::with_capacity(batch * in_len);
    let mut dw = vec![0.0; kl * cout];
    for (pdx, pdw) in parts {
        dx.extend_from_slice(&pdx);
        for (a, v) in dw.iter_mut().zip(&pdw) {
            *a += v;
        }
    }
    let mut db = vec![0.0; cout];
    for row in dyd.chunks_exact(cout) {
        for (a, v) in db.iter_mut().zip(row) {
            *a += v;
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(w.shape(), dw)?,
        Tensor::new(&[cout], db)?,
    ))
}

/// Result of a max-pooling pass: the pooled tensor plus, per output element,
/// the flat in-item index of the selected input and whether the window had a tie.
#[derive(Clone, Debug)]
pub struct PoolOutput {
    pub output: Tensor,
    pub argmax: Vec<u32>,
    pub tied_windows: usize,
}

pub fn maxpool2d(x: &Tensor, k: usize, stride: usize, padding: Padding) -> Result<PoolOutput> {
    let [batch, h, w, c] = dims4(x, "maxpool2d")?;
    let g = Window::new("maxpool2d", h, w, c, k, stride, padding)?;
    let in_len = h * w * c;
    let out_len = g.positions() * c;
    let items = par::map_indices(par::kernel_execution(), batch, |i| {
        let xi = &x.data()[i * in_len..][..in_len];
        let mut out = vec![f64::NEG_INFINITY; out_len];
        let mut arg = vec![u32::MAX; out_len];
        let mut tied = vec![false; out_len];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let base = (oy * g.out_w + ox) * c;
                for ky in 0..k {
                    let Some(iy) = g.src(oy, ky, g.pad_top, h) else { continue };
                    for kx in 0..k {
                        let Some(ix) = g.src(ox, kx, g.pad_left, w) else { continue };
                        let src = (iy * w + ix) * c;
                        for ch in 0..c {
                            let v = xi[src + ch];
                            let o = base + ch;
                            if v > out[o] {
                                out[o] = v;
                                arg[o] = (src + ch) as u32;
                                tied[o] = false;
                            } else if v == out[o] {
                                tied[o] = true;
                            }
                        }
                    }
                }
            }
        }
        let ties = tied.iter().filter(|&&t| t).count();
        (out, arg, ties)
    });
    let mut data = Vec::with_capacity(batch * out_len);
    let mut argmax = Vec::with_capacity(batch * out_len);
    let mut tied_windows = 0;
    for (o, a, t) in items {
        data.extend(o);
        argmax.extend(a);
        tied_windows += t;
    }
    Ok(PoolOutput {
        output: Tensor::new(&[batch, g.out_h, g.out_w, c], data)?,
        argmax,
        tied_windows,
    })
}

/// Routes each upstream gradient to the recorded argmax of its window.
pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[u32], dy: &Tensor) -> Tensor {
    let batch = input_shape[0];
    let in_len: usize = input_shape[1..].iter().product();
    let out_len = dy.len() / batch;
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (o, (&a, &g)) in argmax.iter().zip(dy.data()).enumerate() {
        d[(o / out_len) * in_len + a as usize] += g;
    }
    dx
}

/// Affine map `x * w + b` for `x` (B,F), `w` (F,U), `b` (U).
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [batch, f] = dims2(x, "dense")?;
    let [wf, u] = dims2(w, "dense")?;
    if wf != f {
        return Err(Error::shape("dense", format!("input features {f} do not match weight rows {wf}")));
    }
    if b.shape() != [u] {
        return Err(Error::shape("dense", format!("bias shape {:?} does not match units {u}", b.shape())));
    }
    let mut out = Vec::with_capacity(batch * u);
    for _ in 0..batch {
        out.extend_from_slice(b.data());
    }
    gemm(batch, f, u, x.data(), (f, 1), w.data(), (u, 1), &mut out, 1.0);
    Tensor::new(&[batch, u], out)
}

pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (batch, f) = (x.shape()[0], x.shape()[1]);
    let u = w.shape()[1];
    let mut dx = vec![0.0; batch * f];
    gemm(batch, u, f, dy.data(), (u, 1), w.data(), (1, u), &mut dx, 0.0);
    let mut dw = vec![0.0; f * u];
    gemm(f, batch, u, x.data(), (1, f), dy.data(), (u, 1), &mut dw, 0.0);
    let mut db = vec![0.0; u];
    for row in dy.data().chunks_exact(u) {
        for (a, v) in db.iter_mut().zip(row) {
            *a += v;
        }
    }
    (
        Tensor::new(x.shape(), dx).unwrap(),
        Tensor::new(w.shape(), dw).unwrap(),
        Tensor::new(&[u], db).unwrap(),
    )
}

fn lc_check(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<[usize; 4]> {
    let dims = dims4(x, "locally_connected_1x1")?;
    let [_, h, wd, c] = dims;
    if w.shape() != [h, wd, c] {
        return Err(Error::shape(
            "locally_connected_1x1",
            format!("weight grid {:?} does not match input positions ({h}, {wd}, {c})", w.shape()),
        ));
    }
    if b.shape() != [h, wd] {
        return Err(Error::shape(
            "locally_connected_1x1",
            format!("bias grid {:?} does not match spatial extent ({h}, {wd})", b.shape()),
        ));
    }
    Ok(dims)
}

/// 1x1 convolution with unshared weights: one output channel per position.
pub fn locally_connected_1x1(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [batch, h, wd, c] = lc_check(x, w, b)?;
    let positions = h * wd;
    let mut out = Vec::with_capacity(batch * positions);
    for xi in x.data().chunks_exact(positions * c) {
        for p in 0..positions {
            let xs = &xi[p * c..][..c];
            let ws = &w.data()[p * c..][..c];
            out.push(xs.iter().zip(ws).map(|(a, b)| a * b).sum::<f64>() + b.data()[p]);
        }
    }
    Tensor::new(&[batch, h, wd, 1], out)
}

pub fn locally_connected_1x1_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [_, h, wd, c] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let positions = h * wd;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[h, wd]);
    for ((xi, dxi), dyi) in x
        .data()
        .chunks_exact(positions * c)
        .zip(dx.data_mut().chunks_exact_mut(positions * c))
        .zip(dy.data().chunks_exact(positions))
    {
        for p in 0..positions {
            let g = dyi[p];
            db.data_mut()[p] += g;
            let ws = &w.data()[p * c..][..c];
            let dws = &mut dw.data_mut()[p * c..][..c];
            for ch in 0..c {
                dxi[p * c + ch] = g * ws[ch];
                dws[ch] += g * xi[p * c + ch];
            }
        }
    }
    (dx, dw, db)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    Tensor::from_fn(x.shape(), |i| if x.data()[i] > 0.0 { dy.data()[i] } else { 0.0 })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    Tensor::from_fn(y.shape(), |i| {
        let s = y.data()[i];
        dy.data()[i] * s * (1.0 - s)
    })
}

/// Max-subtracted softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let n = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub fn softmax_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap();
    let mut dx = Tensor::zeros(y.shape());
    for ((yr, gr), dr) in y
        .data()
        .chunks_exact(n)
        .zip(dy.data().chunks_exact(n))
        .zip(dx.data_mut().chunks_exact_mut(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for i in 0..n {
            dr[i] = yr[i] * (gr[i] - dot);
        }
    }
    dx
}

/// Per-channel spatial mean of a (B,H,W,C) volume.
pub fn gap(x: &Tensor) -> Result<Tensor> {
    let [batch, h, w, c] = dims4(x, "gap")?;
    let positions = h * w;
    let mut out = vec![0.0; batch * c];
    for (xi, oi) in x.data().chunks_exact(positions * c).zip(out.chunks_exact_mut(c)) {
        for px in xi.chunks_exact(c) {
            for (o, v) in oi.iter_mut().zip(px) {
                *o += v;
            }
        }
        for o in oi.iter_mut() {
            *o /= positions as f64;
        }
    }
    Tensor::new(&[batch, c], out)
}

pub fn gap_backward(input_shape: &[usize], dy: &Tensor) -> Tensor {
    let (h, w, c) = (input_shape[1], input_shape[2], input_shape[3]);
    let scale = 1.0 / (h * w) as f64;
    let mut dx = Tensor::zeros(input_shape);
    for (dxi, dyi) in dx.data_mut().chunks_exact_mut(h * w * c).zip(dy.data().chunks_exact(c)) {
        for px in dxi.chunks_exact_mut(c) {
            for (d, g) in px.iter_mut().zip(dyi) {
                *d = g * scale;
            }
        }
    }
    dx
}

fn mul_check(volume: &Tensor, mask: &Tensor) -> Result<[usize; 4]> {
    let dims = dims4(volume, "elementwise_mul_broadcast")?;
    let [b, h, w, _] = dims;
    if mask.shape() != [b, h, w, 1] {
        return Err(Error::shape(
            "elementwise_mul_broadcast",
            format!("mask {:?} does not match volume extent ({b}, {h}, {w}, 1)", mask.shape()),
        ));
    }
    Ok(dims)
}

/// Multiplies every channel of `volume` (B,H,W,C) by the one-channel `mask` (B,H,W,1).
pub fn mul_broadcast(volume: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let [_, _, _, c] = mul_check(volume, mask)?;
    let mut out = volume.clone();
    for (px, &m) in out.data_mut().chunks_exact_mut(c).zip(mask.data()) {
        for v in px {
            *v *= m;
        }
    }
    Ok(out)
}

pub fn mul_broadcast_backward(volume: &Tensor, mask: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let c = volume.shape()[3];
    let mut dv = dy.clone();
    let mut dm = Tensor::zeros(mask.shape());
    for (((dvp, vp), gp), (dmv, &m)) in dv
        .data_mut()
        .chunks_exact_mut(c)
        .zip(volume.data().chunks_exact(c))
        .zip(dy.data().chunks_exact(c))
        .zip(dm.data_mut().iter_mut().zip(mask.data()))
    {
        let mut acc = 0.0;
        for ch in 0..c {
            dvp[ch] *= m;
            acc += gp[ch] * vp[ch];
        }
        *dmv = acc;
    }
    (dv, dm)
}

/// Order-preserving concatenation of (B,Fi) tensors along the feature axis.
pub fn concat_features(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
    let batch = dims2(first, "concat_channels")?[0];
    let mut widths = Vec::with_capacity(inputs.len());
    for t in inputs {
        let [b, f] = dims2(t, "concat_channels")?;
        if b != batch {
            return Err(Error::shape("concat_channels", format!("batch extent {b} differs from {batch}")));
        }
        widths.push(f);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(batch * total);
    for row in 0..batch {
        for (t, &f) in inputs.iter().zip(&widths) {
            out.extend_from_slice(&t.data()[row * f..][..f]);
        }
    }
    Tensor::new(&[batch, total], out)
}

pub fn concat_features_backward(widths: &[usize], dy: &Tensor) -> Vec<Tensor> {
    let batch = dy.shape()[0];
    let total: usize = widths.iter().sum();
    let mut offset = 0;
    widths
        .iter()
        .map(|&f| {
            let t = Tensor::from_fn(&[batch, f], |i| dy.data()[(i / f) * total + offset + i % f]);
            offset += f;
            t
        })
        .collect()
}

/// Mean over the batch of `-log(max(p, 1e-12))` at the true class.
pub fn cross_entropy(probs: &Tensor, onehot: &Tensor) -> Result<f64> {
    validate_onehot(probs, onehot)?;
    let [batch, c] = dims2(probs, "cross_entropy")?;
    let mut total = 0.0;
    for (p, y) in probs.data().chunks_exact(c).zip(onehot.data().chunks_exact(c)) {
        for (pv, yv) in p.iter().zip(y) {
            if *yv != 0.0 {
                total -= yv * pv.max(LOG_CLAMP).ln();
            }
        }
    }
    Ok(total / batch as f64)
}

pub fn cross_entropy_backward(probs: &Tensor, onehot: &Tensor, upstream: f64) -> Tensor {
    let batch = probs.shape()[0] as f64;
    Tensor::from_fn(probs.shape(), |i| {
        let (p, y) = (probs.data()[i], onehot.data()[i]);
        if y == 0.0 || p < LOG_CLAMP {
            0.0
        } else {
            -upstream * y / (p * batch)
        }
    })
}

fn validate_onehot(probs: &Tensor, onehot: &Tensor) -> Result<()> {
    if probs.shape() != onehot.shape() {
        return Err(Error::shape(
            "cross_entropy",
            format!("probabilities {:?} vs targets {:?}", probs.shape(), onehot.shape()),
        ));
    }
    let c = dims2(onehot, "cross_entropy")?[1];
    for (r, row) in onehot.data().chunks_exact(c).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::InvalidArgument(format!("target row {r} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

/// One-hot encodes class labels into a (B, classes) tensor.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no labels to encode".into()));
    }
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{classes}")));
        }
        t.data_mut()[i * classes + l] = 1.0;
    }
    Ok(t)
}
