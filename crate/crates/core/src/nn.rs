//! Layer primitives with explicit forward and backward passes.
//!
//! Activations are single-sample volumes laid out channel-major with the
//! first spatial axis fastest: `data[((c * n2 + k) * n1 + j) * n0 + i]`.
//! Weights live in a flat [`ParamSet`](crate::params::ParamSet) buffer and
//! use the equalized learning-rate convention: the stored tensor is scaled by
//! `lr_mult / sqrt(fan_in)` at runtime.

#[cfg(not(feature = "std"))]
#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::params::{Init, ParamSet, Slot};
use crate::real::Real;

pub const LRELU_SLOPE: f64 = 0.2;
pub const LRELU_GAIN: f64 = core::f64::consts::SQRT_2;

/// Spatial extent `[n0, n1, n2]`.
pub type Dims = [usize; 3];

#[inline]
pub fn numel(d: Dims) -> usize {
    d[0] * d[1] * d[2]
}

/// A multi-channel volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Vol<T> {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<T>,
}

impl<T: Real> Vol<T> {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self { channels, dims, data: vec![T::zero(); channels * numel(dims)] }
    }

    pub fn from_data(channels: usize, dims: Dims, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * numel(dims));
        Self { channels, dims, data }
    }

    #[inline]
    pub fn spatial(&self) -> usize {
        numel(self.dims)
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.spatial();
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Dense layer `y = scale * W x + lr_mult * b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Slot,
    pub bias: Option<Slot>,
    pub lr_mult: f64,
}

impl Linear {
    /// Registers `[outputs, inputs]` weights (and optionally a bias).
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias_init: Option<f64>,
        lr_mult: f64,
        rng: &mut R,
    ) -> Self {
        let weight = ps.register(
            &alloc::format!("{name}.weight"),
            &[outputs, inputs],
            Init::Normal(1.0 / lr_mult),
            rng,
        );
        let bias = bias_init.map(|b| {
            ps.register(&alloc::format!("{name}.bias"), &[outputs], Init::Constant(b / lr_mult), rng)
        });
        Self { inputs, outputs, weight, bias, lr_mult }
    }

    pub fn param_count(inputs: usize, outputs: usize, bias: bool) -> usize {
        inputs * outputs + if bias { outputs } else { 0 }
    }

    #[inline]
    pub fn scale<T: Real>(&self) -> T {
        T::lit(self.lr_mult / (self.inputs as f64).sqrt())
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &[T]) -> Vec<T> {
        debug_assert_eq!(x.len(), self.inputs);
        let w = self.weight.get(p);
        let s = self.scale::<T>();
        let lm = T::lit(self.lr_mult);
        (0..self.outputs)
            .map(|o| {
                let row = &w[o * self.inputs..(o + 1) * self.inputs];
                let mut acc = T::zero();
                for (&a, &b) in row.iter().zip(x) {
                    acc = acc + a * b;
                }
                let b = self.bias.map_or(T::zero(), |b| b.get(p)[o] * lm);
                acc * s + b
            })
            .collect()
    }

    /// Accumulates parameter gradients into `g` (when given) and returns `dx`.
    pub fn backward<T: Real>(&self, p: &[T], g: Option<&mut [T]>, x: &[T], dy: &[T]) -> Vec<T> {
        let w = self.weight.get(p);
        let s = self.scale::<T>();
        let mut dx = vec![T::zero(); self.inputs];
        for o in 0..self.outputs {
            let row = &w[o * self.inputs..(o + 1) * self.inputs];
            let d = dy[o] * s;
            for (dxi, &wi) in dx.iter_mut().zip(row) {
                *dxi = *dxi + d * wi;
            }
        }
        if let Some(g) = g {
            {
                let gw = self.weight.get_mut(g);
                for o in 0..self.outputs {
                    let d = dy[o] * s;
                    let row = &mut gw[o * self.inputs..(o + 1) * self.inputs];
                    for (gi, &xi) in row.iter_mut().zip(x) {
                        *gi = *gi + d * xi;
                    }
                }
            }
            if let Some(b) = self.bias {
                let lm = T::lit(self.lr_mult);
                for (gb, &d) in b.get_mut(g).iter_mut().zip(dy) {
                    *gb = *gb + d * lm;
                }
            }
        }
        dx
    }
}

/// 3D convolution with cubic kernel, zero padding `kernel / 2`.
#[derive(Debug, Clone, Copy)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Slot,
    pub bias: Option<Slot>,
}

/// Saved state for [`Conv3d::backward`].
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    in_dims: Dims,
    out_dims: Dims,
    /// im2col matrix; empty when the layer is a pointwise stride-1 conv and
    /// the input itself serves as the column matrix.
    cols: Vec<T>,
    input: Option<Vec<T>>,
}

impl Conv3d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = ps.register(
            &alloc::format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel, kernel],
            Init::Normal(1.0),
            rng,
        );
        let bias = bias.then(|| ps.register(&alloc::format!("{name}.bias"), &[out_channels], Init::Zeros, rng));
        Self { in_channels, out_channels, kernel, stride, weight, bias }
    }

    /// Closed-form trainable scalar count.
    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize, bias: bool) -> usize {
        kernel * kernel * kernel * in_channels * out_channels + if bias { out_channels } else { 0 }
    }

    #[inline]
    fn patch(&self) -> usize {
        self.in_channels * self.kernel * self.kernel * self.kernel
    }

    #[inline]
    pub fn scale<T: Real>(&self) -> T {
        T::lit(1.0 / (self.patch() as f64).sqrt())
    }

    pub fn out_dims(&self, d: Dims) -> Dims {
        let pad = self.kernel / 2;
        let f = |n: usize| (n + 2 * pad - self.kernel) / self.stride + 1;
        [f(d[0]), f(d[1]), f(d[2])]
    }

    #[inline]
    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Output positions `lo..hi` whose tap `kx` lands inside an input axis of length `n`.
    fn valid_range(&self, kx: usize, n: usize, out: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        let lo = (pad.saturating_sub(kx)).div_ceil(self.stride);
        let hi = if n + pad > kx { (n + pad - kx).div_ceil(self.stride).min(out) } else { 0 };
        (lo, hi.max(lo))
    }

    fn im2col<T: Real>(&self, x: &[T], d: Dims, od: Dims) -> Vec<T> {
        let k = self.kernel;
        let pad = self.kernel / 2;
        let p = numel(od);
        let mut cols = vec![T::zero(); self.patch() * p];
        let n_in = numel(d);
        let mut row = 0;
        for c in 0..self.in_channels {
            let xc = &x[c * n_in..(c + 1) * n_in];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let dst = &mut cols[row * p..(row + 1) * p];
                        for oz in 0..od[2] {
                            let iz = (oz * self.stride + kz) as isize - pad as isize;
                            if iz < 0 || iz >= d[2] as isize {
                                continue;
                            }
                            for oy in 0..od[1] {
                                let iy = (oy * self.stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= d[1] as isize {
                                    continue;
                                }
                                let src_base = (iz as usize * d[1] + iy as usize) * d[0];
                                let dst_base = (oz * od[1] + oy) * od[0];
                                let (lo, hi) = self.valid_range(kx, d[0], od[0]);
                                for ox in lo..hi {
                                    dst[dst_base + ox] = xc[src_base + ox * self.stride + kx - pad];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], d: Dims, od: Dims) -> Vec<T> {
        let k = self.kernel;
        let pad = self.kernel / 2;
        let p = numel(od);
        let n_in = numel(d);
        let mut x = vec![T::zero(); self.in_channels * n_in];
        let mut row = 0;
        for c in 0..self.in_channels {
            let xc = &mut x[c * n_in..(c + 1) * n_in];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let src = &cols[row * p..(row + 1) * p];
                        for oz in 0..od[2] {
                            let iz = (oz * self.stride + kz) as isize - pad as isize;
                            if iz < 0 || iz >= d[2] as isize {
                                continue;
                            }
                            for oy in 0..od[1] {
                                let iy = (oy * self.stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= d[1] as isize {
                                    continue;
                                }
                                let dst_base = (iz as usize * d[1] + iy as usize) * d[0];
                                let src_base = (oz * od[1] + oy) * od[0];
                                let (lo, hi) = self.valid_range(kx, d[0], od[0]);
                                for ox in lo..hi {
                                    let t = &mut xc[dst_base + ox * self.stride + kx - pad];
                                    *t = *t + src[src_base + ox];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        x
    }

    pub fn forward<T: Real>(&self, p: &[T], x: &Vol<T>) -> (Vol<T>, ConvCache<T>) {
        debug_assert_eq!(x.channels, self.in_channels);
        let od = self.out_dims(x.dims);
        let n = numel(od);
        let mut y = vec![T::zero(); self.out_channels * n];
        let (cols, input) = if self.pointwise() {
            (Vec::new(), Some(x.data.clone()))
        } else {
            (self.im2col(&x.data, x.dims, od), None)
        };
        let b_mat: &[T] = if self.pointwise() { &x.data } else { &cols };
        let kk = self.patch();
        T::gemm(
            self.out_channels,
            kk,
            n,
            self.scale(),
            self.weight.get(p),
            (kk as isize, 1),
            b_mat,
            (n as isize, 1),
            T::zero(),
            &mut y,
            (n as isize, 1),
        );
        if let Some(b) = self.bias {
            for (o, &bo) in b.get(p).iter().enumerate() {
                for v in &mut y[o * n..(o + 1) * n] {
                    *v = *v + bo;
                }
            }
        }
        (
            Vol::from_data(self.out_channels, od, y),
            ConvCache { in_dims: x.dims, out_dims: od, cols, input },
        )
    }

    /// Accumulates weight/bias gradients into `g` (when given); returns the
    /// input gradient when `want_dx`.
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        g: Option<&mut [T]>,
        cache: &ConvCache<T>,
        dy: &[T],
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let n = numel(cache.out_dims);
        let kk = self.patch();
        let s = self.scale::<T>();
        let b_mat: &[T] = match &cache.input {
            Some(inp) => inp,
            None => &cache.cols,
        };
        if let Some(g) = g {
            T::gemm(
                self.out_channels,
                n,
                kk,
                s,
                dy,
                (n as isize, 1),
                b_mat,
                (1, n as isize),
                T::one(),
                self.weight.get_mut(g),
                (kk as isize, 1),
            );
            if let Some(b) = self.bias {
                let gb = b.get_mut(g);
                for o in 0..self.out_channels {
                    let sum: T = dy[o * n..(o + 1) * n].iter().copied().sum();
                    gb[o] = gb[o] + sum;
                }
            }
        }
        if !want_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); kk * n];
        T::gemm(
            kk,
            self.out_channels,
            n,
            s,
            self.weight.get(p),
            (1, kk as isize),
            dy,
            (n as isize, 1),
            T::zero(),
            &mut dcols,
            (n as isize, 1),
        );
        if self.pointwise() {
            Some(dcols)
        } else {
            Some(self.col2im(&dcols, cache.in_dims, cache.out_dims))
        }
    }
}

/// In-place scaled leaky ReLU.
pub fn lrelu_inplace<T: Real>(v: &mut [T]) {
    let slope = T::lit(LRELU_SLOPE);
    let gain = T::lit(LRELU_GAIN);
    for x in v {
        *x = if *x > T::zero() { *x * gain } else { *x * slope * gain };
    }
}

/// Backward of [`lrelu_inplace`] given its output `y`.
pub fn lrelu_backward_inplace<T: Real>(y: &[T], dy: &mut [T]) {
    let slope = T::lit(LRELU_SLOPE);
    let gain = T::lit(LRELU_GAIN);
    for (d, &yv) in dy.iter_mut().zip(y) {
        *d = if yv > T::zero() { *d * gain } else { *d * slope * gain };
    }
}

/// Nearest-neighbour upsampling by two along every spatial axis.
pub fn upsample2<T: Real>(x: &Vol<T>) -> Vol<T> {
    let d = x.dims;
    let od = [d[0] * 2, d[1] * 2, d[2] * 2];
    let mut y = Vol::zeros(x.channels, od);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = y.channel_mut(c);
        for k in 0..od[2] {
            for j in 0..od[1] {
                let sb = ((k / 2) * d[1] + j / 2) * d[0];
                let db = (k * od[1] + j) * od[0];
                for i in 0..od[0] {
                    dst[db + i] = src[sb + i / 2];
                }
            }
        }
    }
    y
}

/// Adjoint of [`upsample2`]: sums each 2x2x2 block.
pub fn upsample2_backward<T: Real>(dy: &Vol<T>) -> Vol<T> {
    let od = dy.dims;
    let d = [od[0] / 2, od[1] / 2, od[2] / 2];
    let mut dx = Vol::zeros(dy.channels, d);
    for c in 0..dy.channels {
        let src = dy.channel(c);
        let dst = dx.channel_mut(c);
        for k in 0..od[2] {
            for j in 0..od[1] {
                let sb = (k * od[1] + j) * od[0];
                let db = ((k / 2) * d[1] + j / 2) * d[0];
                for i in 0..od[0] {
                    dst[db + i / 2] = dst[db + i / 2] + src[sb + i];
                }
            }
        }
    }
    dx
}

/// Global average over the spatial axes, one value per channel.
pub fn global_avg<T: Real>(x: &Vol<T>) -> Vec<T> {
    let inv = T::one() / T::from_usize(x.spatial()).unwrap();
    (0..x.channels).map(|c| x.channel(c).iter().copied().sum::<T>() * inv).collect()
}

pub fn global_avg_backward<T: Real>(channels: usize, dims: Dims, dy: &[T]) -> Vol<T> {
    let n = numel(dims);
    let inv = T::one() / T::from_usize(n).unwrap();
    let mut dx = Vol::zeros(channels, dims);
    for c in 0..channels {
        let g = dy[c] * inv;
        dx.channel_mut(c).iter_mut().for_each(|v| *v = g);
    }
    dx
}
