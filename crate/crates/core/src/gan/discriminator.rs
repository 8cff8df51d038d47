#[cfg(not(feature = "std"))]
#[allow(unused_imports)]
use num_traits::Float;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::GanArch;
use crate::error::{Error, Result};
use crate::nn::{lrelu_backward_inplace, lrelu_inplace, Conv3d, ConvCache, Linear, Vol};
use crate::params::{Init, ParamSet, Slot};
use crate::real::Real;

const MBSTD_EPS: f64 = 1e-8;

/// Residual-free 3D discriminator with a minibatch-stddev feature and
/// projection class conditioning.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    pub arch: GanArch,
    pub params: ParamSet<T>,
    from_voxel: Conv3d,
    /// `(conv, strided conv)` per block from `resolution` down to 8.
    blocks: Vec<(Conv3d, Conv3d)>,
    epi_conv: Conv3d,
    fc: Linear,
    out: Linear,
    class_embed: Slot,
}

pub type DiscriminatorParams<T> = Discriminator<T>;

#[derive(Debug, Clone)]
struct TrunkCache<T> {
    convs: Vec<(ConvCache<T>, Vec<T>)>,
}

/// Activations saved by [`Discriminator::forward`].
#[derive(Debug, Clone)]
pub struct DiscCache<T> {
    classes: Vec<usize>,
    trunks: Vec<TrunkCache<T>>,
    features: Vec<Vec<T>>,
    /// Per group: `(start, len, std per feature element)`.
    groups: Vec<(usize, usize, Vec<T>)>,
    epi: Vec<(ConvCache<T>, Vec<T>, Vec<T>)>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(arch: GanArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let top = *arch.channels.last().unwrap();
        let from_voxel = Conv3d::new(&mut ps, "from_voxel", 1, top, 1, 1, true, &mut rng);
        let mut blocks = Vec::new();
        for b in (1..arch.channels.len()).rev() {
            let r = 4usize << b;
            let (c, next) = (arch.channels[b], arch.channels[b - 1]);
            let conv0 = Conv3d::new(&mut ps, &alloc::format!("b{r}.conv0"), c, c, 3, 1, true, &mut rng);
            let conv1 = Conv3d::new(&mut ps, &alloc::format!("b{r}.conv1"), c, next, 3, 2, true, &mut rng);
            blocks.push((conv0, conv1));
        }
        let c0 = arch.channels[0];
        let epi_conv = Conv3d::new(&mut ps, "b4.conv", c0 + 1, c0, 3, 1, true, &mut rng);
        let fc = Linear::new(&mut ps, "b4.fc", c0 * 64, c0, Some(0.0), 1.0, &mut rng);
        let out = Linear::new(&mut ps, "b4.out", c0, 1, Some(0.0), 1.0, &mut rng);
        let class_embed = ps.register("b4.class_embed", &[arch.num_classes, c0], Init::Normal(1.0), &mut rng);
        Ok(Self { arch, params: ps, from_voxel, blocks, epi_conv, fc, out, class_embed })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    pub fn closed_form_count(arch: &GanArch) -> usize {
        let ch = &arch.channels;
        let c0 = ch[0];
        let mut n = Conv3d::param_count(1, *ch.last().unwrap(), 1, true);
        for b in 1..ch.len() {
            n += Conv3d::param_count(ch[b], ch[b], 3, true) + Conv3d::param_count(ch[b], ch[b - 1], 3, true);
        }
        n += Conv3d::param_count(c0 + 1, c0, 3, true);
        n += Linear::param_count(c0 * 64, c0, true) + Linear::param_count(c0, 1, true);
        n + arch.num_classes * c0
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            arch: self.arch.clone(),
            params: self.params.cast(),
            from_voxel: self.from_voxel,
            blocks: self.blocks.clone(),
            epi_conv: self.epi_conv,
            fc: self.fc,
            out: self.out,
            class_embed: self.class_embed,
        }
    }

    fn trunk(&self, x: &[T]) -> (Vec<T>, TrunkCache<T>) {
        let p = &self.params.data;
        let r = self.arch.resolution;
        let mut v = Vol::from_data(1, [r, r, r], x.to_vec());
        let mut convs = Vec::new();
        let layers = core::iter::once(&self.from_voxel).chain(self.blocks.iter().flat_map(|(a, b)| [a, b]));
        for conv in layers {
            let (mut y, cache) = conv.forward(p, &v);
            lrelu_inplace(&mut y.data);
            convs.push((cache, y.data.clone()));
            v = y;
        }
        (v.data, TrunkCache { convs })
    }

    fn trunk_backward(&self, cache: &TrunkCache<T>, mut dy: Vec<T>, mut g: Option<&mut [T]>, want_dx: bool) -> Option<Vec<T>> {
        let p = &self.params.data;
        let layers: Vec<&Conv3d> = core::iter::once(&self.from_voxel).chain(self.blocks.iter().flat_map(|(a, b)| [a, b])).collect();
        for (l, conv) in layers.iter().enumerate().rev() {
            let (cc, out) = &cache.convs[l];
            lrelu_backward_inplace(out, &mut dy);
            let need = want_dx || l > 0;
            dy = conv.backward(p, g.as_deref_mut(), cc, &dy, need)?;
        }
        Some(dy)
    }

    fn check_inputs(&self, inputs: &[&[T]], classes: &[usize]) -> Result<()> {
        let n = self.arch.resolution.pow(3);
        if inputs.len() != classes.len() || inputs.is_empty() {
            return Err(Error::InvalidArgument("need one class id per input and a non-empty batch".into()));
        }
        for x in inputs {
            if x.len() != n {
                return Err(Error::ResolutionMismatch { expected: self.arch.resolution, actual: libm::cbrt(x.len() as f64).round() as usize });
            }
        }
        for &c in classes {
            if c >= self.arch.num_classes {
                return Err(Error::ClassOutOfRange { class_id: c, num_classes: self.arch.num_classes });
            }
        }
        Ok(())
    }

    /// Logits for a batch of signed grids (flat data) with class labels.
    pub fn forward(&self, inputs: &[&[T]], classes: &[usize]) -> Result<(Vec<T>, DiscCache<T>)> {
        self.check_inputs(inputs, classes)?;
        let p = &self.params.data;
        let c0 = self.arch.channels[0];
        let (features, trunks): (Vec<_>, Vec<_>) = inputs.iter().map(|x| self.trunk(x)).unzip();
        let fl = c0 * 64;

        // Minibatch standard deviation over consecutive groups.
        let mut groups = Vec::new();
        let mut stat = vec![T::zero(); inputs.len()];
        let gsize = self.arch.mbstd_group;
        let mut start = 0;
        while start < inputs.len() {
            let len = gsize.min(inputs.len() - start);
            let gn = T::from_usize(len).unwrap();
            let mut std = vec![T::zero(); fl];
            for (e, s) in std.iter_mut().enumerate() {
                let mean = (start..start + len).map(|n| features[n][e]).sum::<T>() / gn;
                let var = (start..start + len).map(|n| (features[n][e] - mean).powi(2)).sum::<T>() / gn;
                *s = (var + T::lit(MBSTD_EPS)).sqrt();
            }
            let f = std.iter().copied().sum::<T>() / T::from_usize(fl).unwrap();
            stat[start..start + len].fill(f);
            groups.push((start, len, std));
            start += len;
        }

        let mut logits = Vec::with_capacity(inputs.len());
        let mut epi = Vec::with_capacity(inputs.len());
        let inv_sqrt = T::one() / T::from_usize(c0).unwrap().sqrt();
        for (n, feat) in features.iter().enumerate() {
            let mut x = feat.clone();
            x.extend(core::iter::repeat_n(stat[n], 64));
            let (mut y, cc) = self.epi_conv.forward(p, &Vol::from_data(c0 + 1, [4, 4, 4], x));
            lrelu_inplace(&mut y.data);
            let mut h = self.fc.forward(p, &y.data);
            lrelu_inplace(&mut h);
            let base = self.out.forward(p, &h)[0];
            let e = &self.class_embed.get(p)[classes[n] * c0..(classes[n] + 1) * c0];
            let proj: T = e.iter().zip(&h).map(|(&a, &b)| a * b).sum();
            logits.push(base + proj * inv_sqrt);
            epi.push((cc, y.data, h));
        }
        Ok((logits, DiscCache { classes: classes.to_vec(), trunks, features, groups, epi }))
    }

    /// Backward from `dlogits`. Accumulates parameter gradients into `g`
    /// when given; returns per-input gradients when `want_dx`.
    pub fn backward(&self, cache: &DiscCache<T>, dlogits: &[T], mut g: Option<&mut [T]>, want_dx: bool) -> Option<Vec<Vec<T>>> {
        let p = &self.params.data;
        let c0 = self.arch.channels[0];
        let fl = c0 * 64;
        let inv_sqrt = T::one() / T::from_usize(c0).unwrap().sqrt();
        let batch = dlogits.len();
        let mut dfeat = Vec::with_capacity(batch);
        let mut dstat = vec![T::zero(); batch];
        for n in 0..batch {
            let (cc, y, h) = &cache.epi[n];
            let dl = dlogits[n];
            let class = cache.classes[n];
            let e = &self.class_embed.get(p)[class * c0..(class + 1) * c0];
            let mut dh = self.out.backward(p, g.as_deref_mut(), h, &[dl]);
            for (d, &ev) in dh.iter_mut().zip(e) {
                *d = *d + dl * ev * inv_sqrt;
            }
            if let Some(g) = g.as_deref_mut() {
                let ge = &mut self.class_embed.get_mut(g)[class * c0..(class + 1) * c0];
                for (a, &hv) in ge.iter_mut().zip(h) {
                    *a = *a + dl * hv * inv_sqrt;
                }
            }
            lrelu_backward_inplace(h, &mut dh);
            let mut dy = self.fc.backward(p, g.as_deref_mut(), y, &dh);
            lrelu_backward_inplace(y, &mut dy);
            let dx = self.epi_conv.backward(p, g.as_deref_mut(), cc, &dy, true).unwrap();
            dstat[n] = dx[fl..].iter().copied().sum();
            dfeat.push(dx[..fl].to_vec());
        }
        for (start, len, std) in &cache.groups {
            let gn = T::from_usize(*len).unwrap();
            let df = (*start..start + len).map(|n| dstat[n]).sum::<T>() / T::from_usize(fl).unwrap();
            for e in 0..fl {
                let mean = (*start..start + len).map(|n| cache.features[n][e]).sum::<T>() / gn;
                let k = df / (std[e] * gn);
                for n in *start..start + len {
                    dfeat[n][e] = dfeat[n][e] + k * (cache.features[n][e] - mean);
                }
            }
        }
        let mut dxs = Vec::new();
        for (n, d) in dfeat.into_iter().enumerate() {
            if let Some(dx) = self.trunk_backward(&cache.trunks[n], d, g.as_deref_mut(), want_dx) {
                dxs.push(dx);
            }
        }
        want_dx.then_some(dxs)
    }

    /// Single-sample logit.
    pub fn discriminate(&self, grid: &[T], class_id: usize) -> Result<T> {
        Ok(self.forward(&[grid], &[class_id])?.0[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny() -> GanArch {
        GanArch { channels: vec![3, 2], mbstd_group: 2, ..GanArch::compact(8, 4) }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for arch in [tiny(), GanArch::compact(16, 16), GanArch::desk()] {
            let d = Discriminator::<f32>::new(arch.clone(), 0).unwrap();
            assert_eq!(d.count_parameters(), Discriminator::<f32>::closed_form_count(&arch));
        }
    }

    #[test]
    fn finite_and_class_sensitive() {
        let d = Discriminator::<f32>::new(GanArch::compact(8, 8), 3).unwrap();
        let ones = vec![1.0f32; 512];
        let neg = vec![-1.0f32; 512];
        let a = d.discriminate(&ones, 0).unwrap();
        assert!(a.is_finite() && d.discriminate(&neg, 0).unwrap().is_finite());
        assert_eq!(a, d.discriminate(&ones, 0).unwrap());
        assert_ne!(a, d.discriminate(&ones, 1).unwrap());
        assert!(matches!(d.discriminate(&ones, 9), Err(Error::ClassOutOfRange { .. })));
        assert!(d.discriminate(&ones[..64], 0).is_err());
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        let d = Discriminator::<f64>::new(tiny(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<Vec<f64>> = (0..3).map(|_| (0..512).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let classes = [0usize, 4, 8];
        let weights = [0.7, -1.3, 0.4];
        let loss = |disc: &Discriminator<f64>, xs: &[Vec<f64>]| -> f64 {
            let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
            disc.forward(&refs, &classes).unwrap().0.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let (_, cache) = d.forward(&refs, &classes).unwrap();
        let mut grads = d.params.zeros_like();
        let dx = d.backward(&cache, &weights, Some(&mut grads), true).unwrap();
        let eps = 1e-6;
        for _ in 0..30 {
            let idx = rng.random_range(0..d.params.count());
            let mut dp = d.clone();
            dp.params.data[idx] += eps;
            let lp = loss(&dp, &xs);
            dp.params.data[idx] -= 2.0 * eps;
            let fd = (lp - loss(&dp, &xs)) / (2.0 * eps);
            assert!((fd - grads[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "param {idx}: {fd} vs {}", grads[idx]);
        }
        for _ in 0..20 {
            let n = rng.random_range(0..3);
            let e = rng.random_range(0..512);
            let mut xp = xs.clone();
            xp[n][e] += eps;
            let lp = loss(&d, &xp);
            xp[n][e] -= 2.0 * eps;
            let fd = (lp - loss(&d, &xp)) / (2.0 * eps);
            assert!((fd - dx[n][e]).abs() < 1e-6 * (1.0 + fd.abs()), "x[{n}][{e}]: {fd} vs {}", dx[n][e]);
        }
    }
}
