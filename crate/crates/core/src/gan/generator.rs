use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::modconv::{ModConv, ModConvCache};
use super::{GanArch, LatentCode, LatentZ};
use crate::error::{Error, Result};
use crate::nn::{lrelu_backward_inplace, lrelu_inplace, upsample2, upsample2_backward, Linear, Vol};
use crate::params::{Init, ParamSet, Slot};
use crate::real::Real;
use crate::voxel::SignedGrid;

const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct SynthBlock {
    /// Upsampling conv; absent in the 4^3 block.
    conv0: Option<ModConv>,
    conv1: ModConv,
    to_voxel: ModConv,
}

/// Generator weights together with the layer layout that reads them.
#[derive(Debug, Clone)]
pub struct Generator<T> {
    pub arch: GanArch,
    pub params: ParamSet<T>,
    class_embed: Slot,
    mapping: Vec<Linear>,
    const_input: Slot,
    blocks: Vec<SynthBlock>,
}

pub type GeneratorParams<T> = Generator<T>;

/// Activations saved by [`Generator::synthesize_forward`].
#[derive(Debug, Clone)]
pub struct GenCache<T> {
    w: Vec<T>,
    layers: Vec<[Option<ModConvCache<T>>; 3]>,
    output: Vec<T>,
}

/// Activations saved by [`Generator::map_forward`].
#[derive(Debug, Clone)]
pub struct MapCache<T> {
    class_id: usize,
    embed_raw: Vec<T>,
    inputs: Vec<Vec<T>>,
    outputs: Vec<Vec<T>>,
}

fn normalize_2nd_moment<T: Real>(x: &[T]) -> Vec<T> {
    let n = T::from_usize(x.len()).unwrap();
    let m = x.iter().map(|&v| v * v).sum::<T>() / n + T::lit(NORM_EPS);
    let r = T::one() / m.sqrt();
    x.iter().map(|&v| v * r).collect()
}

fn normalize_2nd_moment_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    let n = T::from_usize(x.len()).unwrap();
    let m = x.iter().map(|&v| v * v).sum::<T>() / n + T::lit(NORM_EPS);
    let r = T::one() / m.sqrt();
    let dot: T = x.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    let k = r * r * r * dot / n;
    x.iter().zip(dy).map(|(&xv, &d)| r * d - k * xv).collect()
}

impl<T: Real> Generator<T> {
    /// Builds a freshly initialized generator; initialization is a pure
    /// function of `(arch, seed)`.
    pub fn new(arch: GanArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let class_embed = ps.register("mapping.embed", &[arch.num_classes, arch.z_dim], Init::Normal(1.0), &mut rng);
        let mut mapping = Vec::new();
        for l in 0..arch.mapping_layers {
            let inputs = if l == 0 { 2 * arch.z_dim } else { arch.w_dim };
            mapping.push(Linear::new(
                &mut ps,
                &alloc::format!("mapping.fc{l}"),
                inputs,
                arch.w_dim,
                Some(0.0),
                arch.mapping_lr_mult,
                &mut rng,
            ));
        }
        let c0 = arch.channels[0];
        let const_input = ps.register("synthesis.const", &[c0, 4, 4, 4], Init::Normal(1.0), &mut rng);
        let mut blocks = Vec::new();
        for (b, &ch) in arch.channels.iter().enumerate() {
            let r = 4usize << b;
            let name = |layer: &str| alloc::format!("synthesis.b{r}.{layer}");
            let conv0 = (b > 0).then(|| {
                ModConv::new(&mut ps, &name("conv0"), arch.w_dim, arch.channels[b - 1], ch, 3, true, true, &mut rng)
            });
            let conv1 = ModConv::new(&mut ps, &name("conv1"), arch.w_dim, ch, ch, 3, true, true, &mut rng);
            let to_voxel = ModConv::new(&mut ps, &name("to_voxel"), arch.w_dim, ch, 1, 1, false, false, &mut rng);
            blocks.push(SynthBlock { conv0, conv1, to_voxel });
        }
        Ok(Self { arch, params: ps, class_embed, mapping, const_input, blocks })
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    /// Per-layer closed form of [`Self::count_parameters`].
    pub fn closed_form_count(arch: &GanArch) -> usize {
        let (z, w) = (arch.z_dim, arch.w_dim);
        let mut n = arch.num_classes * z;
        n += Linear::param_count(2 * z, w, true);
        n += (arch.mapping_layers - 1) * Linear::param_count(w, w, true);
        n += arch.channels[0] * 64;
        for (b, &ch) in arch.channels.iter().enumerate() {
            if b > 0 {
                n += ModConv::param_count(w, arch.channels[b - 1], ch, 3);
            }
            n += ModConv::param_count(w, ch, ch, 3);
            n += ModConv::param_count(w, ch, 1, 1);
        }
        n
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            arch: self.arch.clone(),
            params: self.params.cast(),
            class_embed: self.class_embed,
            mapping: self.mapping.clone(),
            const_input: self.const_input,
            blocks: self.blocks.clone(),
        }
    }

    pub fn w_dim(&self) -> usize {
        self.arch.w_dim
    }

    pub fn resolution(&self) -> usize {
        self.arch.resolution
    }

    fn check_z(&self, z: &LatentZ<T>) -> Result<()> {
        if z.class_id >= self.arch.num_classes {
            return Err(Error::ClassOutOfRange { class_id: z.class_id, num_classes: self.arch.num_classes });
        }
        if z.values.len() != self.arch.z_dim {
            return Err(Error::DimensionMismatch { what: "z", expected: self.arch.z_dim, actual: z.values.len() });
        }
        Ok(())
    }

    pub fn map_forward(&self, z: &LatentZ<T>) -> Result<(LatentCode<T>, MapCache<T>)> {
        self.check_z(z)?;
        let p = &self.params.data;
        let zd = self.arch.z_dim;
        let embed_raw = self.class_embed.get(p)[z.class_id * zd..(z.class_id + 1) * zd].to_vec();
        let mut x = normalize_2nd_moment(&z.values);
        x.extend(normalize_2nd_moment(&embed_raw));
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for layer in &self.mapping {
            let mut y = layer.forward(p, &x);
            lrelu_inplace(&mut y);
            inputs.push(core::mem::replace(&mut x, y.clone()));
            outputs.push(y);
        }
        Ok((LatentCode { values: x }, MapCache { class_id: z.class_id, embed_raw, inputs, outputs }))
    }

    /// Maps an input latent and class to W.
    pub fn map_latent(&self, z: &LatentZ<T>) -> Result<LatentCode<T>> {
        Ok(self.map_forward(z)?.0)
    }

    /// Backpropagates `dw` through the mapping network into `g`.
    pub fn map_backward(&self, cache: &MapCache<T>, dw: &[T], g: &mut [T]) {
        let p = &self.params.data;
        let mut d = dw.to_vec();
        for (l, layer) in self.mapping.iter().enumerate().rev() {
            lrelu_backward_inplace(&cache.outputs[l], &mut d);
            d = layer.backward(p, Some(g), &cache.inputs[l], &d);
        }
        let zd = self.arch.z_dim;
        let de = normalize_2nd_moment_backward(&cache.embed_raw, &d[zd..]);
        let ge = self.class_embed.get_mut(g);
        for (a, b) in ge[cache.class_id * zd..(cache.class_id + 1) * zd].iter_mut().zip(de) {
            *a = *a + b;
        }
    }

    /// Runs the synthesis network, keeping what the backward pass needs.
    pub fn synthesize_forward(&self, w: &LatentCode<T>) -> Result<GenCache<T>> {
        if w.dim() != self.arch.w_dim {
            return Err(Error::DimensionMismatch { what: "w", expected: self.arch.w_dim, actual: w.dim() });
        }
        let p = &self.params.data;
        let wv = &w.values;
        let mut x = Vol::from_data(self.arch.channels[0], [4, 4, 4], self.const_input.get(p).to_vec());
        let mut img: Option<Vol<T>> = None;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut c0 = None;
            if let Some(conv0) = &block.conv0 {
                let (y, c) = conv0.forward(p, upsample2(&x), wv);
                x = y;
                c0 = Some(c);
            }
            let (y, c1) = block.conv1.forward(p, x, wv);
            x = y;
            let (v, ct) = block.to_voxel.forward(p, x.clone(), wv);
            img = Some(match img {
                None => v,
                Some(prev) => {
                    let mut up = upsample2(&prev);
                    for (a, b) in up.data.iter_mut().zip(&v.data) {
                        *a = *a + *b;
                    }
                    up
                }
            });
            layers.push([c0, Some(c1), Some(ct)]);
        }
        let gain = T::lit(self.arch.output_gain);
        let output = img.unwrap().data.into_iter().map(|v| (v * gain).tanh()).collect();
        Ok(GenCache { w: wv.clone(), layers, output })
    }

    /// Deterministic synthesis of a signed grid from a single W code that
    /// modulates every block.
    pub fn synthesize(&self, w: &LatentCode<T>) -> Result<SignedGrid<T>> {
        let cache = self.synthesize_forward(w)?;
        Ok(Self::output_grid(self.arch.resolution, cache.output))
    }

    fn output_grid(resolution: usize, data: Vec<T>) -> SignedGrid<T> {
        // tanh can round to exactly +-1 but never beyond.
        SignedGrid::new(resolution, data).expect("tanh output lies in [-1, 1]")
    }

    pub fn cache_grid(&self, cache: &GenCache<T>) -> SignedGrid<T> {
        Self::output_grid(self.arch.resolution, cache.output.clone())
    }

    /// Backward pass from the gradient of the output grid. Parameter
    /// gradients accumulate into `g` when given; returns `dL/dw`.
    pub fn synthesize_backward(&self, cache: &GenCache<T>, d_out: &[T], mut g: Option<&mut [T]>) -> Vec<T> {
        let p = &self.params.data;
        let wv = &cache.w;
        let mut dw = vec![T::zero(); self.arch.w_dim];
        let gain = T::lit(self.arch.output_gain);
        let r = self.arch.resolution;
        let mut d_img = Vol::from_data(
            1,
            [r, r, r],
            d_out.iter().zip(&cache.output).map(|(&d, &y)| d * gain * (T::one() - y * y)).collect(),
        );
        let mut dx_next: Option<Vol<T>> = None;
        for (b, block) in self.blocks.iter().enumerate().rev() {
            let [c0, c1, ct] = &cache.layers[b];
            let mut dx = block.to_voxel.backward(p, g.as_deref_mut(), ct.as_ref().unwrap(), d_img.data.clone(), wv, &mut dw);
            if let Some(next) = dx_next.take() {
                for (a, b) in dx.data.iter_mut().zip(next.data) {
                    *a = *a + b;
                }
            }
            let dx = block.conv1.backward(p, g.as_deref_mut(), c1.as_ref().unwrap(), dx.data, wv, &mut dw);
            match (&block.conv0, c0) {
                (Some(conv0), Some(c0)) => {
                    let dx = conv0.backward(p, g.as_deref_mut(), c0, dx.data, wv, &mut dw);
                    dx_next = Some(upsample2_backward(&dx));
                    d_img = upsample2_backward(&d_img);
                }
                _ => {
                    if let Some(g) = g.as_deref_mut() {
                        for (a, b) in self.const_input.get_mut(g).iter_mut().zip(&dx.data) {
                            *a = *a + *b;
                        }
                    }
                }
            }
        }
        dw
    }

    /// Styles fed to every modulated layer for `w`, in layer order. Every
    /// entry is derived from the same `w`.
    pub fn style_fan_out(&self, w: &LatentCode<T>) -> Vec<Vec<T>> {
        let p = &self.params.data;
        let mut out = Vec::new();
        for block in &self.blocks {
            if let Some(c0) = &block.conv0 {
                out.push(c0.style(p, &w.values));
            }
            out.push(block.conv1.style(p, &w.values));
            out.push(block.to_voxel.style(p, &w.values));
        }
        out
    }

    /// Number of modulated layers.
    pub fn modulated_layers(&self) -> usize {
        self.blocks.iter().map(|b| 2 + b.conv0.is_some() as usize).sum()
    }

    /// Mapping network weights only, for tests that zero them.
    pub fn mapping_slots(&self) -> Vec<Slot> {
        let mut v = Vec::new();
        for l in &self.mapping {
            v.push(l.weight);
            v.extend(l.bias);
        }
        v
    }

    /// Slot of the final layer's output bias, used to bias outputs in tests
    /// and tools.
    pub fn to_voxel_bias_slots(&self) -> Vec<Slot> {
        self.blocks.iter().map(|b| b.to_voxel.bias).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny() -> GanArch {
        GanArch { z_dim: 6, w_dim: 5, channels: vec![4, 3], ..GanArch::compact(8, 4) }
    }

    fn random_w<T: Real>(rng: &mut ChaCha8Rng, n: usize) -> LatentCode<T> {
        LatentCode { values: (0..n).map(|_| T::lit(StandardNormal.sample(rng))).collect() }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for arch in [tiny(), GanArch::compact(16, 16), GanArch::desk()] {
            let g = Generator::<f32>::new(arch.clone(), 0).unwrap();
            assert_eq!(g.count_parameters(), Generator::<f32>::closed_form_count(&arch));
        }
    }

    #[test]
    fn synthesis_is_bounded_and_deterministic() {
        let g = Generator::<f32>::new(GanArch::compact(16, 16), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let w = random_w::<f32>(&mut rng, g.w_dim());
            let a = g.synthesize(&w).unwrap();
            let b = g.synthesize(&w).unwrap();
            assert!(a.data().iter().all(|v| v.abs() <= 1.0));
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn distinct_w_give_distinct_outputs() {
        let g = Generator::<f32>::new(GanArch::compact(8, 8), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = g.synthesize(&random_w(&mut rng, g.w_dim())).unwrap();
        let b = g.synthesize(&random_w(&mut rng, g.w_dim())).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn mapping_properties() {
        let mut g = Generator::<f64>::new(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let values: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
        let z0 = LatentZ { values: values.clone(), class_id: 0 };
        let z1 = LatentZ { values, class_id: 1 };
        let w0 = g.map_latent(&z0).unwrap();
        assert_eq!(w0, g.map_latent(&z0).unwrap());
        assert_ne!(w0, g.map_latent(&z1).unwrap());
        let bad = LatentZ { values: vec![0.0; 6], class_id: 9 };
        assert!(matches!(g.map_latent(&bad), Err(Error::ClassOutOfRange { .. })));
        for slot in g.mapping_slots() {
            slot.get_mut(&mut g.params.data).fill(0.0);
        }
        assert!(g.map_latent(&z0).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn every_layer_reads_the_same_w() {
        let g = Generator::<f64>::new(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_w::<f64>(&mut rng, 5);
        let styles = g.style_fan_out(&w);
        assert_eq!(styles.len(), g.modulated_layers());
        // Perturbing w changes every style vector.
        let mut w2 = w.clone();
        w2.values[0] += 0.5;
        for (a, b) in styles.iter().zip(g.style_fan_out(&w2)) {
            assert_ne!(a, &b);
        }
    }

    #[test]
    fn synthesis_gradients_match_finite_differences() {
        let g = Generator::<f64>::new(tiny(), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = random_w::<f64>(&mut rng, 5);
        let r: Vec<f64> = (0..512).map(|_| StandardNormal.sample(&mut rng)).collect();
        let loss = |gen: &Generator<f64>, w: &LatentCode<f64>| -> f64 {
            gen.synthesize(w).unwrap().data().iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let cache = g.synthesize_forward(&w).unwrap();
        let mut grads = g.params.zeros_like();
        let dw = g.synthesize_backward(&cache, &r, Some(&mut grads));
        let eps = 1e-6;
        for i in 0..5 {
            let mut wp = w.clone();
            wp.values[i] += eps;
            let lp = loss(&g, &wp);
            wp.values[i] -= 2.0 * eps;
            let fd = (lp - loss(&g, &wp)) / (2.0 * eps);
            assert!((fd - dw[i]).abs() < 1e-6 * (1.0 + fd.abs()), "w[{i}] {fd} vs {}", dw[i]);
        }
        let n = g.params.count();
        let mapping_end = g.const_input.offset;
        for _ in 0..40 {
            let idx = rng.random_range(mapping_end..n);
            let mut gp = g.clone();
            gp.params.data[idx] += eps;
            let lp = loss(&gp, &w);
            gp.params.data[idx] -= 2.0 * eps;
            let fd = (lp - loss(&gp, &w)) / (2.0 * eps);
            assert!((fd - grads[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "param {idx}: {fd} vs {}", grads[idx]);
        }
    }

    #[test]
    fn mapping_gradients_match_finite_differences() {
        let g = Generator::<f64>::new(tiny(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let z = LatentZ { values: (0..6).map(|_| StandardNormal.sample(&mut rng)).collect(), class_id: 2 };
        let r: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
        let loss = |gen: &Generator<f64>| -> f64 {
            gen.map_latent(&z).unwrap().values.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = g.map_forward(&z).unwrap();
        let mut grads = g.params.zeros_like();
        g.map_backward(&cache, &r, &mut grads);
        let eps = 1e-5;
        let end = g.const_input.offset;
        let mut checked = 0;
        for idx in (0..end).step_by(7) {
            let mut gp = g.clone();
            gp.params.data[idx] += eps;
            let lp = loss(&gp);
            gp.params.data[idx] -= 2.0 * eps;
            let fd = (lp - loss(&gp)) / (2.0 * eps);
            assert!((fd - grads[idx]).abs() < 1e-5 * (1.0 + fd.abs()), "param {idx}: {fd} vs {}", grads[idx]);
            checked += 1;
        }
        assert!(checked > 10);
    }
}
