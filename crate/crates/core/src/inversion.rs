//! Embedding a voxel component into the generator's W space by direct
//! optimization of a single latent code.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gan::{sample_z, Generator, LatentCode};
use crate::optim::{cosine_lr, Adam};
use crate::real::Real;
use crate::voxel::{to_signed, VoxelGrid};

/// Divergence rule shared by the latent optimizers: the run aborts once the
/// loss has exceeded `factor` times its initial value for `patience`
/// consecutive steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub factor: f64,
    pub patience: usize,
}

impl Default for Divergence {
    fn default() -> Self {
        Self { factor: 10.0, patience: 100 }
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct DivergenceWatch {
    run: usize,
}

impl DivergenceWatch {
    pub(crate) fn exceeded(&mut self, rule: &Divergence, loss: f64, initial: f64) -> bool {
        if loss > rule.factor * initial || !loss.is_finite() {
            self.run += 1;
        } else {
            self.run = 0;
        }
        self.run >= rule.patience
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    /// Samples averaged for the starting point.
    pub mean_samples: usize,
    /// Restricts the starting-point samples to one class when known.
    pub class_id: Option<usize>,
    pub seed: u64,
    pub divergence: Divergence,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { steps: 500, lr: 0.05, mean_samples: 1000, class_id: None, seed: 0, divergence: Divergence::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InversionResult<T> {
    /// Best iterate.
    pub w: LatentCode<T>,
    pub best_loss: f64,
    pub best_step: usize,
    /// Loss at every evaluated iterate, starting with the initial point.
    pub loss_curve: Vec<f64>,
}

/// Mean of `map_latent` over `n` seeded samples. Each sample draws its class
/// uniformly unless `class_id` is given.
pub fn mean_latent<T: Real>(gen: &Generator<T>, n: usize, seed: u64, class_id: Option<usize>) -> Result<LatentCode<T>> {
    if n == 0 {
        return Err(Error::InvalidArgument("mean_latent needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0f64; gen.w_dim()];
    for _ in 0..n {
        let class = class_id.unwrap_or_else(|| rng.random_range(0..gen.arch.num_classes));
        let z = sample_z::<T, _>(&mut rng, gen.arch.z_dim, class);
        let w = gen.map_latent(&z)?;
        for (a, v) in acc.iter_mut().zip(&w.values) {
            *a += v.as_f64();
        }
    }
    LatentCode::new(acc.into_iter().map(|a| T::lit(a / n as f64)).collect())
}

/// Mean squared signed-space error and its gradient with respect to `w`.
pub fn reconstruction_loss<T: Real>(gen: &Generator<T>, w: &LatentCode<T>, target: &[T]) -> Result<(f64, Vec<T>)> {
    let cache = gen.synthesize_forward(w)?;
    let out = gen.cache_grid(&cache);
    let n = T::from_usize(target.len()).unwrap();
    let diff: Vec<T> = out.data().iter().zip(target).map(|(&o, &t)| o - t).collect();
    let loss = diff.iter().map(|&d| d * d).sum::<T>() / n;
    let dout: Vec<T> = diff.iter().map(|&d| T::lit(2.0) * d / n).collect();
    let dw = gen.synthesize_backward(&cache, &dout, None);
    Ok((loss.as_f64(), dw))
}

/// Finds the latent code whose synthesis best reconstructs `target`.
pub fn invert<T: Real>(gen: &Generator<T>, target: &VoxelGrid, config: &InversionConfig) -> Result<InversionResult<T>> {
    if target.resolution() != gen.resolution() {
        return Err(Error::ResolutionMismatch { expected: gen.resolution(), actual: target.resolution() });
    }
    let start = mean_latent(gen, config.mean_samples, config.seed, config.class_id)?;
    invert_from(gen, target, start, config)
}

/// Like [`invert`] but starting from a given code.
pub fn invert_from<T: Real>(
    gen: &Generator<T>,
    target: &VoxelGrid,
    start: LatentCode<T>,
    config: &InversionConfig,
) -> Result<InversionResult<T>> {
    let t = to_signed::<T>(target).into_data();
    let mut w = start;
    let mut opt = Adam::<T>::new(w.dim(), config.lr, 0.9, 0.999);
    let mut best = (w.clone(), f64::INFINITY, 0usize);
    let mut curve = Vec::with_capacity(config.steps + 1);
    let mut watch = DivergenceWatch::default();
    for step in 0..=config.steps {
        let (loss, grad) = reconstruction_loss(gen, &w, &t)?;
        curve.push(loss);
        if loss < best.1 {
            best = (w.clone(), loss, step);
        }
        if watch.exceeded(&config.divergence, loss, curve[0]) {
            return Err(Error::Diverged {
                step,
                loss,
                initial: curve[0],
                best: best.0.values.iter().map(|v| v.as_f64()).collect(),
                best_loss: best.1,
            });
        }
        if step == config.steps {
            break;
        }
        opt.step_with_lr(&mut w.values, &grad, cosine_lr(config.lr, step, config.steps));
        if w.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { stage: "invert", step, snapshot: alloc::format!("best_loss={}", best.1) });
        }
    }
    Ok(InversionResult { w: best.0, best_loss: best.1, best_step: best.2, loss_curve: curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::{GanArch, LatentZ};
    use crate::voxel::binarize;

    fn gen() -> Generator<f64> {
        Generator::new(GanArch { z_dim: 8, w_dim: 8, ..GanArch::compact(8, 16) }, 3).unwrap()
    }

    #[test]
    fn single_sample_mean_is_that_sample() {
        let g = gen();
        let m = mean_latent(&g, 1, 11, Some(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z: LatentZ<f64> = sample_z(&mut rng, 8, 2);
        assert_eq!(m, g.map_latent(&z).unwrap());
        assert_eq!(mean_latent(&g, 50, 4, None).unwrap(), mean_latent(&g, 50, 4, None).unwrap());
        assert!(mean_latent(&g, 0, 4, None).is_err());
    }

    #[test]
    fn pass_through_mapping_mean_is_small() {
        // One mapping layer emitting [z, -z]: lrelu(a) - lrelu(-a) = 1.2 * gain * a,
        // so the normalized z is recovered exactly from w.
        let arch = GanArch { z_dim: 4, w_dim: 8, mapping_layers: 1, ..GanArch::compact(8, 16) };
        let mut g = Generator::<f64>::new(arch, 3).unwrap();
        let slots = g.mapping_slots();
        slots[1].get_mut(&mut g.params.data).fill(0.0);
        let inv_scale = 8f64.sqrt() / 0.01;
        let wt = slots[0].get_mut(&mut g.params.data);
        wt.fill(0.0);
        for i in 0..4 {
            wt[i * 8 + i] = inv_scale;
            wt[(i + 4) * 8 + i] = -inv_scale;
        }
        let recover = |w: &LatentCode<f64>| -> Vec<f64> {
            (0..4).map(|i| (w.values[i] - w.values[i + 4]) / (1.2 * crate::nn::LRELU_GAIN)).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z: LatentZ<f64> = sample_z(&mut rng, 4, 0);
        let rms = (z.values.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
        for (a, b) in recover(&g.map_latent(&z).unwrap()).iter().zip(&z.values) {
            assert!((a - b / rms).abs() < 1e-6);
        }
        let m = recover(&mean_latent(&g, 2000, 5, None).unwrap());
        let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 0.1 * 4f64.sqrt(), "{norm}");
    }

    #[test]
    fn self_inversion_reduces_loss_and_is_deterministic() {
        let g = gen();
        let w_star = g.map_latent(&LatentZ { values: vec![0.4, -1.0, 0.3, 0.8, -0.2, 1.1, 0.0, -0.7], class_id: 1 }).unwrap();
        let target = binarize(&g.synthesize(&w_star).unwrap(), 0.0);
        let cfg = InversionConfig { steps: 60, mean_samples: 64, ..Default::default() };
        let a = invert(&g, &target, &cfg).unwrap();
        let b = invert(&g, &target, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.best_loss <= a.loss_curve[0]);
        assert_eq!(a.best_loss, a.loss_curve.iter().cloned().fold(f64::INFINITY, f64::min));
        assert!(a.best_loss < 0.5 * a.loss_curve[0]);
    }

    #[test]
    fn trivial_optimum_stays_put() {
        let mut g = gen();
        // Every to_voxel bias at -10 drives the output to -1 everywhere.
        for s in g.to_voxel_bias_slots() {
            s.get_mut(&mut g.params.data).fill(-10.0);
        }
        let target = VoxelGrid::empty(8);
        let cfg = InversionConfig { steps: 20, mean_samples: 32, ..Default::default() };
        let start = mean_latent(&g, 32, cfg.seed, None).unwrap();
        let r = invert(&g, &target, &cfg).unwrap();
        assert!(r.loss_curve[0] < 1e-6);
        assert!(r.w.distance(&start) < 1e-2);
    }

    #[test]
    fn divergence_rule_fires() {
        let rule = Divergence { factor: 10.0, patience: 3 };
        let mut w = DivergenceWatch::default();
        assert!(!w.exceeded(&rule, 11.0, 1.0));
        assert!(!w.exceeded(&rule, 11.0, 1.0));
        assert!(!w.exceeded(&rule, 5.0, 1.0));
        assert!(!w.exceeded(&rule, 11.0, 1.0));
        assert!(!w.exceeded(&rule, 11.0, 1.0));
        assert!(w.exceeded(&rule, 11.0, 1.0));
    }

    #[test]
    fn diverging_run_reports_partial_result() {
        let g = gen();
        let target = VoxelGrid::full(8);
        let cfg = InversionConfig {
            steps: 30,
            lr: 1e3,
            mean_samples: 8,
            divergence: Divergence { factor: 0.0, patience: 5 },
            ..Default::default()
        };
        match invert(&g, &target, &cfg) {
            Err(Error::Diverged { best, step, .. }) => {
                assert_eq!(best.len(), 8);
                assert_eq!(step, 4);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn resolution_mismatch() {
        assert!(matches!(
            invert(&gen(), &VoxelGrid::empty(16), &InversionConfig::default()),
            Err(Error::ResolutionMismatch { .. })
        ));
    }
}
