//! Forward operators used by the network, plus the backward kernels the
//! gradient tape dispatches to.
//!
//! Broadcasting is limited to one pattern: a length-`C` vector scaling every
//! spatial position of a `C×H×W` map.

use std::borrow::Cow;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Over the final axis.
    Softmax,
}

/// `Z[c] = mean over (i, j) of X[c, i, j]`
pub fn mean_pool_spatial<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    let hw = h * w;
    let inv = T::one() / T::from_usize_lossy(hw);
    let data = x
        .data()
        .chunks_exact(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(vec![c], data)
}

pub(crate) fn mean_pool_spatial_backward<T: Scalar>(
    grad: &Tensor<T>,
    input_shape: &[usize],
) -> Tensor<T> {
    let hw: usize = input_shape[1..].iter().product();
    let inv = T::one() / T::from_usize_lossy(hw);
    let data = grad
        .data()
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
        .collect();
    Tensor::new(input_shape.to_vec(), data).expect("pool grad shape")
}

/// `W·z + b` for `W: out×in`.
pub fn fully_connected<T: Scalar>(
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    z: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (out_dim, in_dim) = match weight.shape() {
        &[o, i] => (o, i),
        s => return shape_err(format!("fully connected weight must be 2-D, got {s:?}")),
    };
    if z.shape() != [in_dim] {
        return shape_err(format!(
            "fully connected input {:?} does not match weight {:?}",
            z.shape(),
            weight.shape()
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [out_dim] {
            return shape_err(format!("bias {:?} for {out_dim} outputs", b.shape()));
        }
    }
    let w = weight.data();
    let zv = z.data();
    let data = (0..out_dim)
        .map(|o| {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            let dot: T = row.iter().zip(zv).map(|(&a, &b)| a * b).sum();
            dot + bias.map_or(T::zero(), |b| b.data()[o])
        })
        .collect();
    Tensor::new(vec![out_dim], data)
}

pub(crate) struct LinearGrads<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub input: Tensor<T>,
}

pub(crate) fn fully_connected_backward<T: Scalar>(
    weight: &Tensor<T>,
    z: &Tensor<T>,
    grad: &Tensor<T>,
) -> LinearGrads<T> {
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    let g = grad.data();
    let zv = z.data();
    let w = weight.data();
    let mut dw = Vec::with_capacity(out_dim * in_dim);
    for &go in g {
        dw.extend(zv.iter().map(|&zi| go * zi));
    }
    let mut dz = vec![T::zero(); in_dim];
    for (o, &go) in g.iter().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        for (d, &wv) in dz.iter_mut().zip(row) {
            *d += wv * go;
        }
    }
    LinearGrads {
        weight: Tensor::new(vec![out_dim, in_dim], dw).expect("fc weight grad"),
        bias: grad.clone(),
        input: Tensor::vector(dz),
    }
}

/// Output range `[lo, hi)` whose source index `o * stride + offset` lies in `[0, len_in)`.
fn valid_range(len_in: usize, len_out: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { (-offset + s - 1) / s } else { 0 };
    let hi_incl = (len_in as isize - 1 - offset).div_euclid(s);
    let hi = (hi_incl + 1).clamp(0, len_out as isize);
    (lo.min(hi) as usize, hi as usize)
}

fn conv_geometry(kernel: &Tensor<impl Scalar>, x: &Tensor<impl Scalar>, stride: usize) -> Result<ConvGeometry> {
    let (out_c, in_c, k) = match kernel.shape() {
        &[o, i, kh, kw] if kh == kw => (o, i, kh),
        s => return shape_err(format!("conv kernel must be outC×inC×k×k, got {s:?}")),
    };
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "conv kernel size {k} is even; same padding needs an odd size"
        )));
    }
    if stride == 0 {
        return Err(Error::Config("conv stride must be positive".into()));
    }
    let (c, h, w) = x.chw()?;
    if c != in_c {
        return shape_err(format!("conv expects {in_c} input channels, got {c}"));
    }
    let pad = k / 2;
    Ok(ConvGeometry {
        out_c,
        in_c,
        k,
        pad,
        stride,
        h,
        w,
        out_h: (h + 2 * pad - k) / stride + 1,
        out_w: (w + 2 * pad - k) / stride + 1,
    })
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    out_c: usize,
    in_c: usize,
    k: usize,
    pad: usize,
    stride: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    /// Visits every (output position, input position) pair touched by tap (ky, kx).
    #[inline]
    fn for_tap(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
        let dy = ky as isize - self.pad as isize;
        let dx = kx as isize - self.pad as isize;
        let (y0, y1) = valid_range(self.h, self.out_h, self.stride, dy);
        let (x0, x1) = valid_range(self.w, self.out_w, self.stride, dx);
        for oy in y0..y1 {
            let iy = (oy * self.stride) as isize + dy;
            let out_row = oy * self.out_w;
            let in_row = iy as usize * self.w;
            for ox in x0..x1 {
                let ix = ((ox * self.stride) as isize + dx) as usize;
                f(out_row + ox, in_row + ix);
            }
        }
    }
}

/// Stride-1 cross-correlation with zero "same" padding.
pub fn conv2d<T: Scalar>(
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    conv2d_strided(kernel, bias, x, 1)
}

/// Cross-correlation with zero padding `k/2`; output is `ceil(H/stride)×ceil(W/stride)`.
pub fn conv2d_strided<T: Scalar>(
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    x: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(kernel, x, stride)?;
    if let Some(b) = bias {
        if b.shape() != [g.out_c] {
            return shape_err(format!("conv bias {:?} for {} outputs", b.shape(), g.out_c));
        }
    }
    let plane_out = g.out_h * g.out_w;
    let cols = im2col(&g, x.data());
    let taps = g.in_c * g.k * g.k;
    let kd = kernel.data();
    let mut out = vec![T::zero(); g.out_c * plane_out];
    for (oc, out_plane) in out.chunks_exact_mut(plane_out).enumerate() {
        if let Some(b) = bias {
            out_plane.fill(b.data()[oc]);
        }
        for (&wv, col) in kd[oc * taps..(oc + 1) * taps].iter().zip(cols.chunks_exact(plane_out)) {
            axpy(out_plane, wv, col);
        }
    }
    Tensor::new(vec![g.out_c, g.out_h, g.out_w], out)
}

/// `y += a · x`
#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Rows indexed by `(in channel, ky, kx)`, one column per output position.
/// A stride-1 1×1 convolution reads the input directly.
fn im2col<'a, T: Scalar>(g: &ConvGeometry, x: &'a [T]) -> Cow<'a, [T]> {
    if g.k == 1 && g.stride == 1 {
        return Cow::Borrowed(x);
    }
    let plane_out = g.out_h * g.out_w;
    let plane_in = g.h * g.w;
    let mut cols = vec![T::zero(); g.in_c * g.k * g.k * plane_out];
    let mut rows = cols.chunks_exact_mut(plane_out);
    for ic in 0..g.in_c {
        let in_plane = &x[ic * plane_in..(ic + 1) * plane_in];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = rows.next().expect("row per tap");
                g.for_tap(ky, kx, |o, i| row[o] = in_plane[i]);
            }
        }
    }
    Cow::Owned(cols)
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: Vec<T>) -> Vec<T> {
    if g.k == 1 && g.stride == 1 {
        return cols;
    }
    let plane_out = g.out_h * g.out_w;
    let plane_in = g.h * g.w;
    let mut dx = vec![T::zero(); g.in_c * plane_in];
    let mut rows = cols.chunks_exact(plane_out);
    for ic in 0..g.in_c {
        let dx_plane = &mut dx[ic * plane_in..(ic + 1) * plane_in];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = rows.next().expect("row per tap");
                g.for_tap(ky, kx, |o, i| dx_plane[i] += row[o]);
            }
        }
    }
    dx
}

pub(crate) struct ConvGrads<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub input: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    kernel: &Tensor<T>,
    x: &Tensor<T>,
    stride: usize,
    grad: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(kernel, x, stride)?;
    let plane_out = g.out_h * g.out_w;
    if grad.shape() != [g.out_c, g.out_h, g.out_w] {
        return shape_err(format!("conv output gradient {:?}", grad.shape()));
    }
    let taps = g.in_c * g.k * g.k;
    let kd = kernel.data();
    let gd = grad.data();
    let cols = im2col(&g, x.data());

    let bias: Vec<T> = gd
        .chunks_exact(plane_out)
        .map(|p| p.iter().copied().sum())
        .collect();
    let mut dk = vec![T::zero(); kernel.numel()];
    for (oc, g_plane) in gd.chunks_exact(plane_out).enumerate() {
        for (d, col) in dk[oc * taps..(oc + 1) * taps].iter_mut().zip(cols.chunks_exact(plane_out)) {
            *d = g_plane.iter().zip(col).map(|(&a, &b)| a * b).sum();
        }
    }
    let input = if need_input {
        let mut dcols = vec![T::zero(); taps * plane_out];
        for (oc, g_plane) in gd.chunks_exact(plane_out).enumerate() {
            for (&wv, row) in kd[oc * taps..(oc + 1) * taps].iter().zip(dcols.chunks_exact_mut(plane_out)) {
                axpy(row, wv, g_plane);
            }
        }
        Some(Tensor::new(x.shape().to_vec(), col2im(&g, dcols))?)
    } else {
        None
    };
    Ok(ConvGrads {
        kernel: Tensor::new(kernel.shape().to_vec(), dk)?,
        bias: Tensor::vector(bias),
        input,
    })
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Scalar>(kind: Activation, x: &Tensor<T>) -> Tensor<T> {
    match kind {
        Activation::Relu => x.map(|v| v.max(T::zero())),
        Activation::Sigmoid => x.map(sigmoid_scalar),
        Activation::Softmax => softmax_last_axis(x),
    }
}

fn softmax_last_axis<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().expect("non-empty shape");
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Gradient of an activation given its input, its output and the upstream gradient.
pub(crate) fn activation_backward<T: Scalar>(
    kind: Activation,
    input: &Tensor<T>,
    output: &Tensor<T>,
    grad: &Tensor<T>,
) -> Tensor<T> {
    match kind {
        Activation::Relu => input
            .zip_map(grad, |x, g| if x > T::zero() { g } else { T::zero() })
            .expect("same shape"),
        Activation::Sigmoid => output
            .zip_map(grad, |s, g| g * s * (T::one() - s))
            .expect("same shape"),
        Activation::Softmax => {
            let n = *output.shape().last().expect("non-empty shape");
            let mut dx = grad.clone();
            for (row, s) in dx
                .data_mut()
                .chunks_exact_mut(n)
                .zip(output.data().chunks_exact(n))
            {
                let dot: T = row.iter().zip(s).map(|(&g, &p)| g * p).sum();
                for (d, &p) in row.iter_mut().zip(s) {
                    *d = p * (*d - dot);
                }
            }
            dx
        }
    }
}

/// Hadamard product. When one operand is a `C` vector and the other a `C×H×W`
/// map, the vector is broadcast across the spatial positions.
pub fn elementwise_mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, |x, y| x * y);
    }
    match (a.rank(), b.rank()) {
        (3, 1) => channel_scale(b, a),
        (1, 3) => channel_scale(a, b),
        _ => shape_err(format!(
            "cannot multiply {:?} by {:?}: only equal shapes or channel-vector broadcast",
            a.shape(),
            b.shape()
        )),
    }
}

/// `out[c, i, j] = gate[c] * x[c, i, j]`
pub fn channel_scale<T: Scalar>(gate: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.chw()?;
    if gate.shape() != [c] {
        return shape_err(format!(
            "channel gate {:?} does not match {c} channels",
            gate.shape()
        ));
    }
    let mut out = x.clone();
    for (plane, &gv) in out.data_mut().chunks_exact_mut(h * w).zip(gate.data()) {
        for v in plane {
            *v *= gv;
        }
    }
    Ok(out)
}

pub(crate) fn channel_scale_backward<T: Scalar>(
    gate: &Tensor<T>,
    x: &Tensor<T>,
    grad: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let hw = x.shape()[1] * x.shape()[2];
    let dgate = grad
        .data()
        .chunks_exact(hw)
        .zip(x.data().chunks_exact(hw))
        .map(|(g, xv)| g.iter().zip(xv).map(|(&a, &b)| a * b).sum())
        .collect();
    let dx = channel_scale(gate, grad).expect("gate matches");
    (Tensor::vector(dgate), dx)
}
