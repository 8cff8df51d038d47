use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::nn::{lrelu_backward_inplace, lrelu_inplace, Conv3d, ConvCache, Linear, Vol};
use crate::params::{Init, ParamSet, Slot};
use crate::real::Real;

const DEMOD_EPS: f64 = 1e-8;

/// Style-modulated convolution.
///
/// Computed in the input-scaling form: the input is multiplied by the
/// per-channel style, convolved with the shared weight and, when
/// demodulating, each output channel is rescaled to unit expected norm.
#[derive(Debug, Clone, Copy)]
pub struct ModConv {
    pub affine: Linear,
    pub conv: Conv3d,
    pub bias: Slot,
    pub demodulate: bool,
    pub activate: bool,
}

#[derive(Debug, Clone)]
pub struct ModConvCache<T> {
    input: Vol<T>,
    style: Vec<T>,
    conv: ConvCache<T>,
    /// Pre-demodulation conv output (only kept when demodulating).
    raw: Vec<T>,
    demod: Vec<T>,
    output: Vec<T>,
}

impl ModConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamSet<T>,
        name: &str,
        w_dim: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        demodulate: bool,
        activate: bool,
        rng: &mut R,
    ) -> Self {
        let affine = Linear::new(ps, &alloc::format!("{name}.affine"), w_dim, in_channels, Some(1.0), 1.0, rng);
        let conv = Conv3d::new(ps, name, in_channels, out_channels, kernel, 1, false, rng);
        let bias = ps.register(&alloc::format!("{name}.bias"), &[out_channels], Init::Zeros, rng);
        Self { affine, conv, bias, demodulate, activate }
    }

    pub fn param_count(w_dim: usize, in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        Linear::param_count(w_dim, in_channels, true) + Conv3d::param_count(in_channels, out_channels, kernel, false) + out_channels
    }

    pub fn style<T: Real>(&self, p: &[T], w: &[T]) -> Vec<T> {
        self.affine.forward(p, w)
    }

    fn demod_factors<T: Real>(&self, p: &[T], style: &[T]) -> Vec<T> {
        let k3 = self.conv.kernel.pow(3);
        let cin = self.conv.in_channels;
        let c: T = self.conv.scale();
        let weight = self.conv.weight.get(p);
        (0..self.conv.out_channels)
            .map(|o| {
                let mut acc = T::zero();
                for i in 0..cin {
                    let row = &weight[(o * cin + i) * k3..(o * cin + i + 1) * k3];
                    let ww: T = row.iter().map(|&v| v * v).sum();
                    acc = acc + ww * style[i] * style[i];
                }
                T::one() / (acc * c * c + T::lit(DEMOD_EPS)).sqrt()
            })
            .collect()
    }

    pub fn forward<T: Real>(&self, p: &[T], x: Vol<T>, w: &[T]) -> (Vol<T>, ModConvCache<T>) {
        let style = self.style(p, w);
        let mut xs = x.clone();
        for (c, &s) in style.iter().enumerate() {
            xs.channel_mut(c).iter_mut().for_each(|v| *v = *v * s);
        }
        let (mut y, conv) = self.conv.forward(p, &xs);
        let n = y.spatial();
        let (raw, demod) = if self.demodulate {
            let raw = y.data.clone();
            let demod = self.demod_factors(p, &style);
            for (o, &d) in demod.iter().enumerate() {
                y.data[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = *v * d);
            }
            (raw, demod)
        } else {
            (Vec::new(), Vec::new())
        };
        for (o, &b) in self.bias.get(p).iter().enumerate() {
            y.data[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = *v + b);
        }
        if self.activate {
            lrelu_inplace(&mut y.data);
        }
        let output = y.data.clone();
        (y, ModConvCache { input: x, style, conv, raw, demod, output })
    }

    /// Accumulates parameter gradients into `g` (when given), adds the style
    /// gradient into `dw`, and returns the input gradient.
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        mut g: Option<&mut [T]>,
        cache: &ModConvCache<T>,
        mut dy: Vec<T>,
        w: &[T],
        dw: &mut [T],
    ) -> Vol<T> {
        if self.activate {
            lrelu_backward_inplace(&cache.output, &mut dy);
        }
        let cout = self.conv.out_channels;
        let cin = self.conv.in_channels;
        let n = dy.len() / cout;
        if let Some(g) = g.as_deref_mut() {
            let gb = self.bias.get_mut(g);
            for o in 0..cout {
                let s: T = dy[o * n..(o + 1) * n].iter().copied().sum();
                gb[o] = gb[o] + s;
            }
        }
        let mut dstyle = vec![T::zero(); cin];
        let mut ddemod_a = Vec::new();
        if self.demodulate {
            // d = (A + eps)^(-1/2); dL/dA = dL/dd * (-1/2) d^3
            for o in 0..cout {
                let dd: T = dy[o * n..(o + 1) * n]
                    .iter()
                    .zip(&cache.raw[o * n..(o + 1) * n])
                    .map(|(&a, &b)| a * b)
                    .sum();
                let d = cache.demod[o];
                ddemod_a.push(dd * T::lit(-0.5) * d * d * d);
                dy[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = *v * d);
            }
        }
        let dxs = self.conv.backward(p, g.as_deref_mut(), &cache.conv, &dy, true).unwrap();
        let mut dx = Vol::from_data(cin, cache.input.dims, dxs);
        for i in 0..cin {
            let s = cache.style[i];
            let xi = cache.input.channel(i);
            let dxi = dx.channel_mut(i);
            let mut acc = T::zero();
            for (d, &xv) in dxi.iter_mut().zip(xi) {
                acc = acc + *d * xv;
                *d = *d * s;
            }
            dstyle[i] = acc;
        }
        if self.demodulate {
            let k3 = self.conv.kernel.pow(3);
            let c: T = self.conv.scale();
            let two_c2 = T::lit(2.0) * c * c;
            let weight = self.conv.weight.get(p);
            for o in 0..cout {
                let da = ddemod_a[o];
                for i in 0..cin {
                    let row = &weight[(o * cin + i) * k3..(o * cin + i + 1) * k3];
                    let ww: T = row.iter().map(|&v| v * v).sum();
                    let s = cache.style[i];
                    dstyle[i] = dstyle[i] + da * two_c2 * s * ww;
                }
            }
            if let Some(g) = g.as_deref_mut() {
                let gw = self.conv.weight.get_mut(g);
                for o in 0..cout {
                    let da = ddemod_a[o];
                    for i in 0..cin {
                        let s = cache.style[i];
                        let f = da * two_c2 * s * s;
                        let base = (o * cin + i) * k3;
                        for t in 0..k3 {
                            gw[base + t] = gw[base + t] + f * weight[base + t];
                        }
                    }
                }
            }
        }
        let dwi = self.affine.backward(p, g, w, &dstyle);
        for (a, b) in dw.iter_mut().zip(dwi) {
            *a = *a + b;
        }
        dx
    }
}
