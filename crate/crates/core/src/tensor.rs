//! Channel-major 3D tensors and the convolution kernels the networks are built
//! from, each with a hand-written backward pass.
//!
//! Layout is `[channel][d][h][w]`, row-major. Kernels parallelize over disjoint
//! output channels (or weight blocks), and every reduction runs in a fixed
//! order, so results do not depend on the thread count.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive};
use rand::{Rng, RngCore};

use crate::par;
use crate::volumes::Field;

/// Floating-point element type of network tensors (`f32` for training, `f64`
/// for gradient verification).
pub trait Real:
    Float + FromPrimitive + Sum + AddAssign + MulAssign + Send + Sync + Debug + Default + 'static
{
    const NAME: &'static str;
}

impl Real for f32 {
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NAME: &'static str = "f64";
}

#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, dims: [usize; 3]) -> Self {
        Self {
            channels,
            dims,
            data: vec![T::zero(); channels * dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_field(f: &Field) -> Self {
        let s = f.shape();
        Self {
            channels: 1,
            dims: [s[0], s[1], s[2]],
            data: f.iter().map(|&v| lit(v)).collect(),
        }
    }

    /// Stacks single-channel fields along the channel axis.
    pub fn from_fields(fields: &[&Field]) -> Self {
        let s = fields[0].shape();
        let mut data = Vec::with_capacity(fields.len() * fields[0].len());
        for f in fields {
            assert_eq!(f.shape(), s, "stacked fields must share a shape");
            data.extend(f.iter().map(|&v| lit::<T>(v)));
        }
        Self {
            channels: fields.len(),
            dims: [s[0], s[1], s[2]],
            data,
        }
    }

    pub fn channel_to_field(&self, c: usize) -> Field {
        let n = self.spatial();
        let v = self.data[c * n..(c + 1) * n]
            .iter()
            .map(|x| x.to_f64().unwrap())
            .collect();
        Field::from_shape_vec(self.dims, v).expect("tensor dims")
    }

    pub fn spatial(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert!(self.same_layout(other));
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += *b);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn relu<T: Real>(x: &mut Tensor<T>) {
    x.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward<T: Real>(y: &Tensor<T>, g: &mut Tensor<T>) {
    g.data
        .iter_mut()
        .zip(&y.data)
        .for_each(|(g, &y)| {
            if y <= T::zero() {
                *g = T::zero();
            }
        });
}

pub fn leaky_relu<T: Real>(x: &mut Tensor<T>, slope: T) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v *= slope;
        }
    });
}

pub fn leaky_relu_backward<T: Real>(y: &Tensor<T>, g: &mut Tensor<T>, slope: T) {
    g.data.iter_mut().zip(&y.data).for_each(|(g, &y)| {
        if y < T::zero() {
            *g *= slope;
        }
    });
}

/// Inverted-dropout multiplier: 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask<T: Real>(len: usize, rate: f64, rng: &mut dyn RngCore) -> Vec<T> {
    let keep = 1.0 - rate;
    let scale: T = lit(1.0 / keep);
    (0..len)
        .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
        .collect()
}

pub fn apply_mask<T: Real>(x: &mut Tensor<T>, mask: &[T]) {
    x.data.iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes;
/// the combination order is fixed.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Range of output indices `o` for which `o*stride + tap - pad` lands inside
/// `[0, n_in)`.
#[inline]
fn valid_range(n_in: usize, n_out: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let off = tap as i64 - pad as i64;
    let s = stride as i64;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi = (n_in as i64 - 1 - off).div_euclid(s) + 1;
    let hi = hi.min(n_out as i64);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// Cubic-kernel 3D convolution with zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[cout][cin][kz][ky][kx]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv3d<T> {
    pub fn zeros(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight: vec![T::zero(); cout * cin * kernel.pow(3)],
            bias: vec![T::zero(); cout],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    pub fn out_dims(&self, d: [usize; 3]) -> [usize; 3] {
        d.map(|n| (n + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    pub fn zero_like(&self) -> Self {
        Self::zeros(self.cin, self.cout, self.kernel, self.stride, self.pad)
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> {
        let k = self.kernel;
        (0..k * k * k).map(move |t| (t, t / (k * k), (t / k) % k, t % k))
    }

    /// Stride 1 with output shape equal to input shape.
    fn is_same(&self) -> bool {
        self.stride == 1 && 2 * self.pad + 1 == self.kernel
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels, self.cin, "conv input channels");
        if self.is_same() {
            return self.forward_same(x);
        }
        let id = x.dims;
        let od = self.out_dims(id);
        let mut y = Tensor::zeros(self.cout, od);
        let n_out = y.spatial();
        let n_in = x.spatial();
        let kk = self.kernel.pow(3);
        let (s, p) = (self.stride, self.pad);
        par::for_each_chunk_mut(&mut y.data, n_out, |co, out| {
            out.iter_mut().for_each(|v| *v = self.bias[co]);
            for ci in 0..self.cin {
                let inp = &x.data[ci * n_in..(ci + 1) * n_in];
                let wbase = (co * self.cin + ci) * kk;
                for (t, kz, ky, kx) in self.taps() {
                    let w = self.weight[wbase + t];
                    if w == T::zero() {
                        continue;
                    }
                    let (z0, z1) = valid_range(id[0], od[0], s, kz, p);
                    let (y0, y1) = valid_range(id[1], od[1], s, ky, p);
                    let (x0, x1) = valid_range(id[2], od[2], s, kx, p);
                    if x0 >= x1 {
                        continue;
                    }
                    for oz in z0..z1 {
                        let iz = oz * s + kz - p;
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let orow = (oz * od[1] + oy) * od[2];
                            let irow = (iz * id[1] + iy) * id[2];
                            let ix0 = x0 * s + kx - p;
                            if s == 1 {
                                axpy(w, &inp[irow + ix0..irow + ix0 + (x1 - x0)], &mut out[orow + x0..orow + x1]);
                            } else {
                                for (j, ox) in (x0..x1).enumerate() {
                                    out[orow + ox] += w * inp[irow + ix0 + j * s];
                                }
                            }
                        }
                    }
                }
            }
        });
        y
    }

    /// Accumulates parameter gradients into `grad` and, if requested, returns
    /// the gradient with respect to the input.
    pub fn backward(&self, x: &Tensor<T>, gy: &Tensor<T>, grad: &mut Self, need_input_grad: bool) -> Option<Tensor<T>> {
        let id = x.dims;
        let od = gy.dims;
        debug_assert_eq!(od, self.out_dims(id));
        let n_out = gy.spatial();
        let n_in = x.spatial();
        let kk = self.kernel.pow(3);
        let (s, p) = (self.stride, self.pad);

        for (co, b) in grad.bias.iter_mut().enumerate() {
            *b += gy.data[co * n_out..(co + 1) * n_out].iter().copied().sum::<T>();
        }
        if self.is_same() {
            return self.backward_same(x, gy, grad, need_input_grad);
        }

        // one task per (cout, cin) weight block
        par::for_each_chunk_mut(&mut grad.weight, kk, |pair, gw| {
            let (co, ci) = (pair / self.cin, pair % self.cin);
            let g = &gy.data[co * n_out..(co + 1) * n_out];
            let inp = &x.data[ci * n_in..(ci + 1) * n_in];
            for (t, kz, ky, kx) in self.taps() {
                let (z0, z1) = valid_range(id[0], od[0], s, kz, p);
                let (y0, y1) = valid_range(id[1], od[1], s, ky, p);
                let (x0, x1) = valid_range(id[2], od[2], s, kx, p);
                if x0 >= x1 {
                    continue;
                }
                let mut acc = T::zero();
                for oz in z0..z1 {
                    let iz = oz * s + kz - p;
                    for oy in y0..y1 {
                        let iy = oy * s + ky - p;
                        let orow = (oz * od[1] + oy) * od[2];
                        let irow = (iz * id[1] + iy) * id[2];
                        let ix0 = x0 * s + kx - p;
                        if s == 1 {
                            acc += dot(&g[orow + x0..orow + x1], &inp[irow + ix0..irow + ix0 + (x1 - x0)]);
                        } else {
                            for (j, ox) in (x0..x1).enumerate() {
                                acc += g[orow + ox] * inp[irow + ix0 + j * s];
                            }
                        }
                    }
                }
                gw[t] += acc;
            }
        });

        if !need_input_grad {
            return None;
        }
        let mut gx = Tensor::zeros(self.cin, id);
        par::for_each_chunk_mut(&mut gx.data, n_in, |ci, gin| {
            for co in 0..self.cout {
                let g = &gy.data[co * n_out..(co + 1) * n_out];
                let wbase = (co * self.cin + ci) * kk;
                for (t, kz, ky, kx) in self.taps() {
                    let w = self.weight[wbase + t];
                    if w == T::zero() {
                        continue;
                    }
                    let (z0, z1) = valid_range(id[0], od[0], s, kz, p);
                    let (y0, y1) = valid_range(id[1], od[1], s, ky, p);
                    let (x0, x1) = valid_range(id[2], od[2], s, kx, p);
                    if x0 >= x1 {
                        continue;
                    }
                    for oz in z0..z1 {
                        let iz = oz * s + kz - p;
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let orow = (oz * od[1] + oy) * od[2];
                            let irow = (iz * id[1] + iy) * id[2];
                            let ix0 = x0 * s + kx - p;
                            if s == 1 {
                                axpy(w, &g[orow + x0..orow + x1], &mut gin[irow + ix0..irow + ix0 + (x1 - x0)]);
                            } else {
                                for (j, ox) in (x0..x1).enumerate() {
                                    gin[irow + ix0 + j * s] += w * g[orow + ox];
                                }
                            }
                        }
                    }
                }
            }
        });
        Some(gx)
    }
}

/// Zero-padded frame for "same" convolutions. Output voxel `o` lives at
/// padded index `o` (in padded strides), and tap `t` reads padded index
/// `o + offset[t]`, so every tap is one contiguous pass over `len` values.
struct Frame {
    pd: [usize; 3],
    /// Padded volume size.
    pn: usize,
    /// Span of frame positions that map to output voxels.
    len: usize,
    offsets: Vec<usize>,
}

impl Frame {
    fn new(dims: [usize; 3], kernel: usize, pad: usize) -> Self {
        let pd = dims.map(|n| n + 2 * pad);
        let k = kernel;
        let offsets = (0..k * k * k)
            .map(|t| ((t / (k * k)) * pd[1] + (t / k) % k) * pd[2] + t % k)
            .collect();
        Self {
            pd,
            pn: pd.iter().product(),
            len: ((dims[0] - 1) * pd[1] + dims[1] - 1) * pd[2] + dims[2],
            offsets,
        }
    }

    /// Row starts `(dense, frame)` of every output row, with the frame
    /// position shifted by `shift` in each axis.
    fn rows(&self, dims: [usize; 3], shift: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let (pd1, pd2) = (self.pd[1], self.pd[2]);
        (0..dims[0] * dims[1]).map(move |r| {
            let (z, y) = (r / dims[1], r % dims[1]);
            (r * dims[2], ((z + shift) * pd1 + y + shift) * pd2 + shift)
        })
    }
}

impl<T: Real> Conv3d<T> {
    fn padded_input(&self, x: &Tensor<T>, f: &Frame) -> Vec<T> {
        let n = x.spatial();
        let w = x.dims[2];
        let mut out = vec![T::zero(); self.cin * f.pn];
        for ci in 0..self.cin {
            let src = &x.data[ci * n..(ci + 1) * n];
            let dst = &mut out[ci * f.pn..(ci + 1) * f.pn];
            for (d, p) in f.rows(x.dims, self.pad) {
                dst[p..p + w].copy_from_slice(&src[d..d + w]);
            }
        }
        out
    }

    fn forward_same(&self, x: &Tensor<T>) -> Tensor<T> {
        let dims = x.dims;
        let f = Frame::new(dims, self.kernel, self.pad);
        let padded = self.padded_input(x, &f);
        let kk = f.offsets.len();
        let mut y = Tensor::zeros(self.cout, dims);
        let n = y.spatial();
        par::for_each_chunk_mut(&mut y.data, n, |co, out| {
            let mut q = vec![self.bias[co]; f.len];
            for ci in 0..self.cin {
                let src = &padded[ci * f.pn..(ci + 1) * f.pn];
                let wbase = (co * self.cin + ci) * kk;
                for (t, &off) in f.offsets.iter().enumerate() {
                    let w = self.weight[wbase + t];
                    if w != T::zero() {
                        axpy(w, &src[off..off + f.len], &mut q);
                    }
                }
            }
            for (d, p) in f.rows(dims, 0) {
                out[d..d + dims[2]].copy_from_slice(&q[p..p + dims[2]]);
            }
        });
        y
    }

    fn backward_same(&self, x: &Tensor<T>, gy: &Tensor<T>, grad: &mut Self, need_input_grad: bool) -> Option<Tensor<T>> {
        let dims = x.dims;
        let f = Frame::new(dims, self.kernel, self.pad);
        let padded = self.padded_input(x, &f);
        let kk = f.offsets.len();
        let n = gy.spatial();
        let w = dims[2];
        // output gradient in frame layout, zero at positions that are not outputs
        let mut gq = vec![T::zero(); self.cout * f.len];
        for co in 0..self.cout {
            let src = &gy.data[co * n..(co + 1) * n];
            let dst = &mut gq[co * f.len..(co + 1) * f.len];
            for (d, p) in f.rows(dims, 0) {
                dst[p..p + w].copy_from_slice(&src[d..d + w]);
            }
        }
        par::for_each_chunk_mut(&mut grad.weight, kk, |pair, gw| {
            let (co, ci) = (pair / self.cin, pair % self.cin);
            let g = &gq[co * f.len..(co + 1) * f.len];
            let src = &padded[ci * f.pn..(ci + 1) * f.pn];
            for (t, &off) in f.offsets.iter().enumerate() {
                gw[t] += dot(g, &src[off..off + f.len]);
            }
        });
        if !need_input_grad {
            return None;
        }
        let mut gx = Tensor::zeros(self.cin, dims);
        par::for_each_chunk_mut(&mut gx.data, n, |ci, gin| {
            let mut gp = vec![T::zero(); f.pn];
            for co in 0..self.cout {
                let g = &gq[co * f.len..(co + 1) * f.len];
                let wbase = (co * self.cin + ci) * kk;
                for (t, &off) in f.offsets.iter().enumerate() {
                    let wt = self.weight[wbase + t];
                    if wt != T::zero() {
                        axpy(wt, g, &mut gp[off..off + f.len]);
                    }
                }
            }
            for (d, p) in f.rows(dims, self.pad) {
                gin[d..d + w].copy_from_slice(&gp[p..p + w]);
            }
        });
        Some(gx)
    }
}

/// 2x upsampling transposed convolution (kernel 2, stride 2).
#[derive(Debug, Clone, PartialEq)]
pub struct UpConv3d<T> {
    pub cin: usize,
    pub cout: usize,
    /// `[cin][cout][dz][dy][dx]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> UpConv3d<T> {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            weight: vec![T::zero(); cin * cout * 8],
            bias: vec![T::zero(); cout],
        }
    }

    pub fn zero_like(&self) -> Self {
        Self::zeros(self.cin, self.cout)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels, self.cin, "upconv input channels");
        let id = x.dims;
        let od = id.map(|n| 2 * n);
        let mut y = Tensor::zeros(self.cout, od);
        let (n_in, n_out) = (x.spatial(), y.spatial());
        par::for_each_chunk_mut(&mut y.data, n_out, |co, out| {
            out.iter_mut().for_each(|v| *v = self.bias[co]);
            for ci in 0..self.cin {
                let inp = &x.data[ci * n_in..(ci + 1) * n_in];
                let w = &self.weight[(ci * self.cout + co) * 8..(ci * self.cout + co + 1) * 8];
                for z in 0..id[0] {
                    for yy in 0..id[1] {
                        let irow = &inp[(z * id[1] + yy) * id[2]..(z * id[1] + yy + 1) * id[2]];
                        for dz in 0..2 {
                            for dy in 0..2 {
                                let (w0, w1) = (w[dz * 4 + dy * 2], w[dz * 4 + dy * 2 + 1]);
                                let orow = ((2 * z + dz) * od[1] + 2 * yy + dy) * od[2];
                                let orow = &mut out[orow..orow + od[2]];
                                for (o, &v) in orow.chunks_exact_mut(2).zip(irow) {
                                    o[0] += w0 * v;
                                    o[1] += w1 * v;
                                }
                            }
                        }
                    }
                }
            }
        });
        y
    }

    pub fn backward(&self, x: &Tensor<T>, gy: &Tensor<T>, grad: &mut Self, need_input_grad: bool) -> Option<Tensor<T>> {
        let id = x.dims;
        let od = gy.dims;
        let (n_in, n_out) = (x.spatial(), gy.spatial());
        for (co, b) in grad.bias.iter_mut().enumerate() {
            *b += gy.data[co * n_out..(co + 1) * n_out].iter().copied().sum::<T>();
        }
        par::for_each_chunk_mut(&mut grad.weight, 8, |pair, gw| {
            let (ci, co) = (pair / self.cout, pair % self.cout);
            let inp = &x.data[ci * n_in..(ci + 1) * n_in];
            let g = &gy.data[co * n_out..(co + 1) * n_out];
            for (t, w) in gw.iter_mut().enumerate() {
                let (dz, dy, dx) = (t >> 2, (t >> 1) & 1, t & 1);
                let mut acc = T::zero();
                for z in 0..id[0] {
                    for yy in 0..id[1] {
                        let irow = (z * id[1] + yy) * id[2];
                        let orow = ((2 * z + dz) * od[1] + 2 * yy + dy) * od[2];
                        for xx in 0..id[2] {
                            acc += inp[irow + xx] * g[orow + 2 * xx + dx];
                        }
                    }
                }
                *w += acc;
            }
        });
        if !need_input_grad {
            return None;
        }
        let mut gx = Tensor::zeros(self.cin, id);
        par::for_each_chunk_mut(&mut gx.data, n_in, |ci, gin| {
            for co in 0..self.cout {
                let g = &gy.data[co * n_out..(co + 1) * n_out];
                for t in 0..8 {
                    let (dz, dy, dx) = (t >> 2, (t >> 1) & 1, t & 1);
                    let w = self.weight[(ci * self.cout + co) * 8 + t];
                    for z in 0..id[0] {
                        for yy in 0..id[1] {
                            let irow = (z * id[1] + yy) * id[2];
                            let orow = ((2 * z + dz) * od[1] + 2 * yy + dy) * od[2];
                            for xx in 0..id[2] {
                                gin[irow + xx] += w * g[orow + 2 * xx + dx];
                            }
                        }
                    }
                }
            }
        });
        Some(gx)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn rand_tensor(c: usize, d: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let mut t = Tensor::zeros(c, d);
        t.data = randn(t.data.len(), rng);
        t
    }

    /// Direct 7-loop convolution used as an oracle.
    fn naive_conv(c: &Conv3d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let od = c.out_dims(x.dims);
        let mut y = Tensor::zeros(c.cout, od);
        let k = c.kernel;
        for co in 0..c.cout {
            for oz in 0..od[0] {
                for oy in 0..od[1] {
                    for ox in 0..od[2] {
                        let mut acc = c.bias[co];
                        for ci in 0..c.cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * c.stride + kz) as i64 - c.pad as i64;
                                        let iy = (oy * c.stride + ky) as i64 - c.pad as i64;
                                        let ix = (ox * c.stride + kx) as i64 - c.pad as i64;
                                        let inside = |v: i64, n: usize| v >= 0 && (v as usize) < n;
                                        if inside(iz, x.dims[0]) && inside(iy, x.dims[1]) && inside(ix, x.dims[2]) {
                                            let xi = ((ci * x.dims[0] + iz as usize) * x.dims[1] + iy as usize) * x.dims[2] + ix as usize;
                                            let wi = (((co * c.cin + ci) * k + kz) * k + ky) * k + kx;
                                            acc += c.weight[wi] * x.data[xi];
                                        }
                                    }
                                }
                            }
                        }
                        y.data[((co * od[0] + oz) * od[1] + oy) * od[2] + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn random_conv(cin: usize, cout: usize, k: usize, s: usize, p: usize, rng: &mut ChaCha8Rng) -> Conv3d<f64> {
        let mut c = Conv3d::zeros(cin, cout, k, s, p);
        c.weight = randn(c.weight.len(), rng);
        c.bias = randn(c.bias.len(), rng);
        c
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s, p, d) in [(3, 1, 1, [5, 6, 7]), (2, 2, 0, [6, 4, 8]), (3, 2, 1, [7, 5, 4]), (1, 1, 0, [3, 3, 3]), (3, 1, 0, [5, 6, 7]), (3, 1, 1, [1, 1, 4]), (3, 2, 1, [1, 2, 3])] {
            let c = random_conv(2, 3, k, s, p, &mut rng);
            let x = rand_tensor(2, d, &mut rng);
            let a = c.forward(&x);
            let b = naive_conv(&c, &x);
            assert_eq!(a.dims, b.dims);
            for (u, v) in a.data.iter().zip(&b.data) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    /// Loss = <r, conv(x)>; checks analytic gradients against central differences.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (k, s, p) in [(3, 1, 1), (2, 2, 0), (3, 2, 1), (3, 1, 0), (1, 1, 0)] {
            let c = random_conv(2, 2, k, s, p, &mut rng);
            let x = rand_tensor(2, [4, 5, 4], &mut rng);
            let r = randn(c.forward(&x).data.len(), &mut rng);
            let loss = |c: &Conv3d<f64>, x: &Tensor<f64>| c.forward(x).data.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
            let mut grad = c.zero_like();
            let mut gy = c.forward(&x);
            gy.data = r.clone();
            let gx = c.backward(&x, &gy, &mut grad, true).unwrap();
            let h = 1e-6;
            for i in (0..x.data.len()).step_by(7) {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data[i] += h;
                xm.data[i] -= h;
                let fd = (loss(&c, &xp) - loss(&c, &xm)) / (2.0 * h);
                assert!((fd - gx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
            for i in 0..c.weight.len() {
                let (mut cp, mut cm) = (c.clone(), c.clone());
                cp.weight[i] += h;
                cm.weight[i] -= h;
                let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
                assert!((fd - grad.weight[i]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
            let fd_b: f64 = r.chunks(r.len() / 2).next().unwrap().iter().sum();
            assert!((fd_b - grad.bias[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn upconv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut u = UpConv3d::zeros(3, 2);
        u.weight = randn(u.weight.len(), &mut rng);
        u.bias = randn(2, &mut rng);
        let x = rand_tensor(3, [2, 3, 2], &mut rng);
        let y = u.forward(&x);
        assert_eq!(y.dims, [4, 6, 4]);
        // each output voxel gets exactly one tap per input channel
        let (z, yy, xx) = (1usize, 4usize, 3usize);
        let t = (z & 1) * 4 + (yy & 1) * 2 + (xx & 1);
        let mut expect = u.bias[1];
        for ci in 0..3 {
            let xi = ((ci * 2 + z / 2) * 3 + yy / 2) * 2 + xx / 2;
            expect += u.weight[(ci * 2 + 1) * 8 + t] * x.data[xi];
        }
        let yi = ((4 + z) * 6 + yy) * 4 + xx;
        assert!((y.data[yi] - expect).abs() < 1e-12);

        let r = randn(y.data.len(), &mut rng);
        let loss = |u: &UpConv3d<f64>, x: &Tensor<f64>| u.forward(x).data.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        let mut grad = u.zero_like();
        let mut gy = y.clone();
        gy.data = r.clone();
        let gx = u.backward(&x, &gy, &mut grad, true).unwrap();
        let h = 1e-6;
        for i in 0..x.data.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += h;
            xm.data[i] -= h;
            let fd = (loss(&u, &xp) - loss(&u, &xm)) / (2.0 * h);
            assert!((fd - gx.data[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        for i in 0..u.weight.len() {
            let (mut up, mut um) = (u.clone(), u.clone());
            up.weight[i] += h;
            um.weight[i] -= h;
            let fd = (loss(&up, &x) - loss(&um, &x)) / (2.0 * h);
            assert!((fd - grad.weight[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn dot_matches_sequential_sum() {
        let a: Vec<f64> = (0..29).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..29).map(|i| 1.0 - i as f64 * 0.1).collect();
        let expect: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - expect).abs() < 1e-10);
    }

    #[test]
    fn valid_range_edges() {
        // k3 s1 p1 on 5 voxels: tap 0 skips ox=0, tap 2 skips ox=4
        assert_eq!(valid_range(5, 5, 1, 0, 1), (1, 5));
        assert_eq!(valid_range(5, 5, 1, 2, 1), (0, 4));
        assert_eq!(valid_range(1, 1, 2, 0, 1), (0, 0));
        assert_eq!(valid_range(1, 1, 2, 1, 1), (0, 1));
    }
}
