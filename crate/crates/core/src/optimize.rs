//! Comparator-driven optimization of components in W space: direct latent
//! optimization and a trained latent mapper.
//!
//! Both minimize
//! `H(0, C(v, G(w'))) + λ1 |Δ| + λ2 |G(w') - v| (+ λ3 |mask ⊙ (G(w') - v)|)`
//! where `w'` is the edited code and `Δ` its offset from the source code.
//! Label 0 asks the comparator to rank the edited shape above `v`.

#[cfg(not(feature = "std"))]
#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::comparator::{comparator_loss_logit, Comparator};
use crate::error::{Error, Result};
use crate::gan::{Generator, LatentCode};
use crate::inversion::{Divergence, DivergenceWatch};
use crate::nn::{lrelu_backward_inplace, lrelu_inplace, Linear};
use crate::optim::{cosine_lr, Adam};
use crate::params::ParamSet;
use crate::real::Real;
use crate::voxel::{to_signed, SignedGrid, VoxelGrid};

/// Loss weights shared by both methods.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Penalties {
    /// Latent-space distance weight.
    pub lambda1: f64,
    /// Data-space distance weight.
    pub lambda2: f64,
    /// Protected-region weight; only used with a mask.
    pub lambda3: f64,
    /// Use squared norms instead of plain Euclidean norms.
    pub squared: bool,
}

impl Default for Penalties {
    fn default() -> Self {
        Self { lambda1: 4.0, lambda2: 0.2, lambda3: 1.0, squared: false }
    }
}

impl Penalties {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidArgument(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Returns `λ·|x|` (or `λ·|x|²`) and adds its gradient into `grad`.
    fn norm_term<T: Real>(&self, lambda: f64, x: &[T], grad: &mut [T]) -> f64 {
        if lambda == 0.0 {
            return 0.0;
        }
        let sq: f64 = x.iter().map(|v| v.as_f64() * v.as_f64()).sum();
        if self.squared {
            for (g, &v) in grad.iter_mut().zip(x) {
                *g = *g + T::lit(2.0 * lambda) * v;
            }
            lambda * sq
        } else {
            let n = sq.sqrt();
            if n > 0.0 {
                for (g, &v) in grad.iter_mut().zip(x) {
                    *g = *g + T::lit(lambda / n) * v;
                }
            }
            lambda * n
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptConfig {
    pub penalties: Penalties,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    pub divergence: Divergence,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self { penalties: Penalties::default(), steps: 200, step_size: 0.05, seed: 0, divergence: Divergence::default() }
    }
}

/// Loss components; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub comparator: f64,
    pub latent: f64,
    pub data: f64,
    pub protect: f64,
}

impl LossBreakdown {
    fn new(comparator: f64, latent: f64, data: f64, protect: f64) -> Self {
        Self { total: comparator + latent + data + protect, comparator, latent, data, protect }
    }
}

fn check_dims<T: Real>(gen: &Generator<T>, comp: &Comparator<T>, v: &[T], w: &[T]) -> Result<()> {
    let n = gen.resolution().pow(3);
    if v.len() != n {
        return Err(Error::DimensionMismatch { what: "source grid", expected: n, actual: v.len() });
    }
    if w.len() != gen.w_dim() {
        return Err(Error::DimensionMismatch { what: "latent code", expected: gen.w_dim(), actual: w.len() });
    }
    if comp.input_channels() != 2 {
        return Err(Error::DimensionMismatch { what: "comparator channels", expected: 2, actual: comp.input_channels() });
    }
    Ok(())
}

/// Evaluates the objective at the edited code `w_edit` with latent offset
/// `delta`. Returns the breakdown, the gradient with respect to `w_edit`
/// through the generator, the gradient with respect to `delta`, and the
/// synthesized grid.
#[allow(clippy::type_complexity)]
fn objective<T: Real>(
    gen: &Generator<T>,
    comp: &Comparator<T>,
    v: &[T],
    w_edit: &LatentCode<T>,
    delta: &[T],
    pen: &Penalties,
    mask: Option<&[bool]>,
) -> Result<(LossBreakdown, Vec<T>, Vec<T>, SignedGrid<T>)> {
    let res = gen.resolution();
    let cache = gen.synthesize_forward(w_edit)?;
    let out = gen.cache_grid(&cache);
    let (logit, cc) = comp.forward(v, out.data(), res)?;
    let (c_loss, dlogit) = comparator_loss_logit(logit, 0);
    let (_, mut d_out) = comp.backward(&cc, dlogit, None, true).unwrap();
    let diff: Vec<T> = out.data().iter().zip(v).map(|(&a, &b)| a - b).collect();
    let data = pen.norm_term(pen.lambda2, &diff, &mut d_out);
    let protect = match mask {
        Some(m) => {
            let masked: Vec<T> = diff.iter().zip(m).map(|(&d, &k)| if k { d } else { T::zero() }).collect();
            pen.norm_term(pen.lambda3, &masked, &mut d_out)
        }
        None => 0.0,
    };
    let mut d_delta = vec![T::zero(); delta.len()];
    let latent = pen.norm_term(pen.lambda1, delta, &mut d_delta);
    let dw = gen.synthesize_backward(&cache, &d_out, None);
    Ok((LossBreakdown::new(c_loss.as_f64(), latent, data, protect), dw, d_delta, out))
}

/// Latent-optimization objective at `w` for source `v` and source code `w_s`,
/// with its gradient with respect to `w`.
pub fn latent_opt_loss<T: Real>(
    gen: &Generator<T>,
    comp: &Comparator<T>,
    v: &SignedGrid<T>,
    w: &LatentCode<T>,
    w_s: &LatentCode<T>,
    pen: &Penalties,
    mask: Option<&VoxelGrid>,
) -> Result<(LossBreakdown, Vec<T>)> {
    check_dims(gen, comp, v.data(), &w.values)?;
    check_dims(gen, comp, v.data(), &w_s.values)?;
    let mask = checked_mask(gen, mask)?;
    let delta: Vec<T> = w.values.iter().zip(&w_s.values).map(|(&a, &b)| a - b).collect();
    let (loss, mut dw, dd, _) = objective(gen, comp, v.data(), w, &delta, pen, mask)?;
    for (a, b) in dw.iter_mut().zip(dd) {
        *a = *a + b;
    }
    Ok((loss, dw))
}

fn checked_mask<'a, T: Real>(gen: &Generator<T>, mask: Option<&'a VoxelGrid>) -> Result<Option<&'a [bool]>> {
    match mask {
        Some(m) if m.resolution() != gen.resolution() => {
            Err(Error::ResolutionMismatch { expected: gen.resolution(), actual: m.resolution() })
        }
        Some(m) => Ok(Some(m.data())),
        None => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentOptResult<T> {
    pub w: LatentCode<T>,
    pub grid: SignedGrid<T>,
    pub best_step: usize,
    /// Loss components at every evaluated iterate, starting with `w_s`.
    pub trace: Vec<LossBreakdown>,
}

/// Gradient descent on `w` from `w_s` with a cosine-decayed step size;
/// returns the best iterate.
pub fn run_latent_optimization<T: Real>(
    gen: &Generator<T>,
    comp: &Comparator<T>,
    v: &VoxelGrid,
    w_s: &LatentCode<T>,
    config: &OptConfig,
    mask: Option<&VoxelGrid>,
) -> Result<LatentOptResult<T>> {
    config.penalties.validate()?;
    if v.resolution() != gen.resolution() {
        return Err(Error::ResolutionMismatch { expected: gen.resolution(), actual: v.resolution() });
    }
    let vs = to_signed::<T>(v).into_data();
    check_dims(gen, comp, &vs, &w_s.values)?;
    let mask = checked_mask(gen, mask)?;
    let mut w = w_s.clone();
    let mut best: Option<(LatentCode<T>, SignedGrid<T>, f64, usize)> = None;
    let mut trace = Vec::with_capacity(config.steps + 1);
    let mut watch = DivergenceWatch::default();
    for step in 0..=config.steps {
        let delta: Vec<T> = w.values.iter().zip(&w_s.values).map(|(&a, &b)| a - b).collect();
        let (loss, mut grad, dd, grid) = objective(gen, comp, &vs, &w, &delta, &config.penalties, mask)?;
        trace.push(loss);
        if best.as_ref().is_none_or(|b| loss.total < b.2) {
            best = Some((w.clone(), grid, loss.total, step));
        }
        let initial = trace[0].total;
        if watch.exceeded(&config.divergence, loss.total, initial) {
            let b = best.unwrap();
            return Err(Error::Diverged {
                step,
                loss: loss.total,
                initial,
                best: b.0.values.iter().map(|v| v.as_f64()).collect(),
                best_loss: b.2,
            });
        }
        if step == config.steps {
            break;
        }
        let lr = T::lit(cosine_lr(config.step_size, step, config.steps));
        for ((wi, g), d) in w.values.iter_mut().zip(grad.iter_mut()).zip(dd) {
            *wi = *wi - lr * (*g + d);
        }
        if w.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { stage: "latent optimization", step, snapshot: format!("{loss:?}") });
        }
    }
    let (w, grid, _, best_step) = best.unwrap();
    Ok(LatentOptResult { w, grid, best_step, trace })
}

pub const MAPPER_LAYERS: usize = 4;

/// Scale applied to the initial last-layer weights so that `M(w) ≈ 0` at start.
const MAPPER_OUT_INIT: f64 = 0.01;

/// Latent mapper `M: W -> W` inferring a manipulation step.
#[derive(Debug, Clone)]
pub struct Mapper<T> {
    pub params: ParamSet<T>,
    layers: Vec<Linear>,
}

pub type MapperParams<T> = Mapper<T>;

#[derive(Debug, Clone)]
pub struct MapperCache<T> {
    inputs: Vec<Vec<T>>,
    outputs: Vec<Vec<T>>,
}

impl<T: Real> Mapper<T> {
    pub fn new(w_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let layers: Vec<Linear> = (0..MAPPER_LAYERS)
            .map(|l| Linear::new(&mut params, &format!("m{l}"), w_dim, w_dim, Some(0.0), 1.0, &mut rng))
            .collect();
        for v in layers[MAPPER_LAYERS - 1].weight.get_mut(&mut params.data) {
            *v = *v * T::lit(MAPPER_OUT_INIT);
        }
        Self { params, layers }
    }

    pub fn w_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    /// Layers in evaluation order.
    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn cast<U: Real>(&self) -> Mapper<U> {
        Mapper { params: self.params.cast(), layers: self.layers.clone() }
    }

    pub fn forward(&self, w: &[T]) -> (Vec<T>, MapperCache<T>) {
        let p = &self.params.data;
        let mut x = w.to_vec();
        let (mut inputs, mut outputs) = (Vec::new(), Vec::new());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(p, &x);
            if l + 1 < self.layers.len() {
                lrelu_inplace(&mut y);
            }
            inputs.push(core::mem::replace(&mut x, y.clone()));
            outputs.push(y);
        }
        (x, MapperCache { inputs, outputs })
    }

    /// Accumulates parameter gradients for output gradient `d_out` into `g`.
    pub fn backward(&self, cache: &MapperCache<T>, d_out: &[T], g: &mut [T]) {
        let p = &self.params.data;
        let mut d = d_out.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if l + 1 < self.layers.len() {
                lrelu_backward_inplace(&cache.outputs[l], &mut d);
            }
            d = layer.backward(p, Some(&mut *g), &cache.inputs[l], &d);
        }
    }

    pub fn step(&self, w: &LatentCode<T>) -> Result<Vec<T>> {
        if w.dim() != self.w_dim() {
            return Err(Error::DimensionMismatch { what: "latent code", expected: self.w_dim(), actual: w.dim() });
        }
        Ok(self.forward(&w.values).0)
    }
}

/// Mapper objective for one source `(w, v)` and its gradient with respect to
/// the mapper parameters.
pub fn mapper_loss<T: Real>(
    gen: &Generator<T>,
    comp: &Comparator<T>,
    v: &SignedGrid<T>,
    w: &LatentCode<T>,
    mapper: &Mapper<T>,
    pen: &Penalties,
) -> Result<(LossBreakdown, Vec<T>)> {
    check_dims(gen, comp, v.data(), &w.values)?;
    if mapper.w_dim() != gen.w_dim() {
        return Err(Error::DimensionMismatch { what: "mapper width", expected: gen.w_dim(), actual: mapper.w_dim() });
    }
    let (m, cache) = mapper.forward(&w.values);
    let edited = LatentCode { values: w.values.iter().zip(&m).map(|(&a, &b)| a + b).collect() };
    let (loss, dw, dm, _) = objective(gen, comp, v.data(), &edited, &m, pen, None)?;
    let d_out: Vec<T> = dw.iter().zip(&dm).map(|(&a, &b)| a + b).collect();
    let mut g = mapper.params.zeros_like();
    mapper.backward(&cache, &d_out, &mut g);
    Ok((loss, g))
}

/// Returns `w + M(w)` and its synthesis.
pub fn apply_mapper<T: Real>(gen: &Generator<T>, mapper: &Mapper<T>, w: &LatentCode<T>) -> Result<(LatentCode<T>, SignedGrid<T>)> {
    let m = mapper.step(w)?;
    let edited = LatentCode::new(w.values.iter().zip(&m).map(|(&a, &b)| a + b).collect())?;
    let grid = gen.synthesize(&edited)?;
    Ok((edited, grid))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperTrainConfig {
    pub penalties: Penalties,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MapperTrainConfig {
    fn default() -> Self {
        Self { penalties: Penalties::default(), epochs: 20, batch_size: 8, lr: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MapperTrainLog {
    /// Mean components at the initial mapper, before any update.
    pub initial: LossBreakdown,
    /// Mean components over each epoch's updates.
    pub epochs: Vec<LossBreakdown>,
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let s = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown::new(s(|b| b.comparator), s(|b| b.latent), s(|b| b.data), s(|b| b.protect))
}

/// Trains a mapper with Adam on the mean mapper objective. The generator and
/// comparator are only read.
pub fn train_mapper<T: Real>(
    gen: &Generator<T>,
    comp: &Comparator<T>,
    latents: &[(LatentCode<T>, SignedGrid<T>)],
    config: &MapperTrainConfig,
) -> Result<(Mapper<T>, MapperTrainLog)> {
    config.penalties.validate()?;
    if latents.is_empty() || config.batch_size == 0 {
        return Err(Error::InvalidArgument("mapper training needs latents and a positive batch size".into()));
    }
    let mut mapper = Mapper::<T>::new(gen.w_dim(), config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x3a9);
    let mut opt = Adam::<T>::new(mapper.params.count(), config.lr, 0.9, 0.999);
    let mut initial = Vec::with_capacity(latents.len());
    for (w, v) in latents {
        initial.push(mapper_loss(gen, comp, v, w, &mapper, &config.penalties)?.0);
    }
    let mut log = MapperTrainLog { initial: mean_breakdown(&initial), epochs: Vec::new() };
    let mut order: Vec<usize> = (0..latents.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut seen = Vec::with_capacity(latents.len());
        for batch in order.chunks(config.batch_size) {
            let mut g = mapper.params.zeros_like();
            let scale = T::one() / T::from_usize(batch.len()).unwrap();
            for &i in batch {
                let (w, v) = &latents[i];
                let (loss, gi) = mapper_loss(gen, comp, v, w, &mapper, &config.penalties)?;
                seen.push(loss);
                for (a, b) in g.iter_mut().zip(gi) {
                    *a = *a + b * scale;
                }
            }
            opt.step(&mut mapper.params.data, &g);
        }
        let mean = mean_breakdown(&seen);
        if !mean.total.is_finite() || !mapper.params.all_finite() {
            return Err(Error::NonFinite { stage: "train_mapper", step: epoch, snapshot: format!("{mean:?}") });
        }
        log::info!("mapper epoch {epoch}: {mean:?}");
        log.epochs.push(mean);
    }
    Ok((mapper, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comparator::ComparatorArch;
    use crate::gan::GanArch;
    use rand::Rng;

    fn setup() -> (Generator<f64>, Comparator<f64>) {
        let g = Generator::new(GanArch { z_dim: 8, w_dim: 8, ..GanArch::compact(8, 16) }, 1).unwrap();
        let c = Comparator::new(ComparatorArch { widths: vec![4, 8, 8] }, 2).unwrap();
        (g, c)
    }

    fn latent(g: &Generator<f64>, seed: u64) -> LatentCode<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.map_latent(&crate::gan::sample_z(&mut rng, 8, (seed % 9) as usize)).unwrap()
    }

    fn random_grid(seed: u64) -> SignedGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SignedGrid::new(8, (0..512).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    #[test]
    fn loss_at_source_reduces_to_comparator_term() {
        let (g, mut c) = setup();
        let ws = latent(&g, 3);
        let v = g.synthesize(&ws).unwrap();
        let pen = Penalties::default();
        let (l, _) = latent_opt_loss(&g, &c, &v, &ws, &ws, &pen, None).unwrap();
        assert_eq!((l.latent, l.data), (0.0, 0.0));
        let logit = c.logit(&v, &v).unwrap();
        assert_eq!(l.comparator, comparator_loss_logit(logit, 0).0);
        c.params.data.fill(0.0);
        let (l, _) = latent_opt_loss(&g, &c, &v, &ws, &ws, &pen, None).unwrap();
        assert!((l.total - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let (g, c) = setup();
        for (k, squared) in [(0u64, false), (1, true)] {
            let ws = latent(&g, 10 + k);
            let w = LatentCode::new(ws.values.iter().enumerate().map(|(i, v)| v + 0.1 * (i as f64 - 3.5)).collect()).unwrap();
            let v = random_grid(20 + k);
            let mask = VoxelGrid::from_fn(8, |i, _, _| i < 4);
            let pen = Penalties { lambda1: 0.7, lambda2: 0.3, lambda3: 0.5, squared };
            let (_, grad) = latent_opt_loss(&g, &c, &v, &w, &ws, &pen, Some(&mask)).unwrap();
            let eps = 1e-6;
            for i in 0..8 {
                let mut wp = w.clone();
                wp.values[i] += eps;
                let lp = latent_opt_loss(&g, &c, &v, &wp, &ws, &pen, Some(&mask)).unwrap().0.total;
                wp.values[i] -= 2.0 * eps;
                let lm = latent_opt_loss(&g, &c, &v, &wp, &ws, &pen, Some(&mask)).unwrap().0.total;
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn mapper_gradient_matches_finite_differences() {
        let (g, c) = setup();
        let mut mapper = Mapper::<f64>::new(8, 5);
        let last = mapper.layers[3].weight;
        for v in last.get_mut(&mut mapper.params.data) {
            *v *= 30.0;
        }
        let w = latent(&g, 7);
        let v = random_grid(8);
        let pen = Penalties { lambda1: 0.4, lambda2: 0.2, lambda3: 0.0, squared: false };
        let (_, grad) = mapper_loss(&g, &c, &v, &w, &mapper, &pen).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let eps = 1e-6;
        for _ in 0..20 {
            let i = rng.random_range(0..mapper.count_parameters());
            let mut m = mapper.clone();
            m.params.data[i] += eps;
            let lp = mapper_loss(&g, &c, &v, &w, &m, &pen).unwrap().0.total;
            m.params.data[i] -= 2.0 * eps;
            let lm = mapper_loss(&g, &c, &v, &w, &m, &pen).unwrap().0.total;
            let fd = (lp - lm) / (2.0 * eps);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn zero_mapper_matches_latent_objective() {
        let (g, c) = setup();
        let mut mapper = Mapper::<f64>::new(8, 1);
        mapper.params.data.fill(0.0);
        let ws = latent(&g, 4);
        let v = g.synthesize(&ws).unwrap();
        let pen = Penalties::default();
        let (lm, _) = mapper_loss(&g, &c, &v, &ws, &mapper, &pen).unwrap();
        let (lo, _) = latent_opt_loss(&g, &c, &v, &ws, &ws, &pen, None).unwrap();
        assert_eq!(lm, lo);
        let (w2, grid) = apply_mapper(&g, &mapper, &ws).unwrap();
        assert_eq!(w2, ws);
        assert_eq!(grid, v);
        // Against a different source the data term is still |G(w) - v|.
        let other = random_grid(3);
        let (lm, _) = mapper_loss(&g, &c, &other, &ws, &mapper, &pen).unwrap();
        let d: f64 = v.data().iter().zip(other.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!((lm.data - 0.2 * d).abs() < 1e-12);
    }

    #[test]
    fn constant_step_norm() {
        let (g, c) = setup();
        let mut mapper = Mapper::<f64>::new(8, 1);
        mapper.params.data.fill(0.0);
        let step = 0.03;
        mapper.layers[3].bias.unwrap().get_mut(&mut mapper.params.data).fill(step);
        let w = latent(&g, 2);
        let v = g.synthesize(&w).unwrap();
        let pen = Penalties { lambda1: 1.0, ..Default::default() };
        let (l, _) = mapper_loss(&g, &c, &v, &w, &mapper, &pen).unwrap();
        assert!((l.latent - step * 8f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn components_sum_and_ablation() {
        let (g, c) = setup();
        let ws = latent(&g, 6);
        let v = crate::voxel::binarize(&random_grid(6), 0.0);
        let cfg = OptConfig { steps: 10, step_size: 0.5, ..Default::default() };
        let r = run_latent_optimization(&g, &c, &v, &ws, &cfg, None).unwrap();
        for t in &r.trace {
            assert!(t.comparator >= 0.0 && t.latent >= 0.0 && t.data >= 0.0 && t.protect == 0.0);
            assert_eq!(t.total, t.comparator + t.latent + t.data + t.protect);
        }
        assert_eq!(r.trace[r.best_step].total, r.trace.iter().map(|t| t.total).fold(f64::INFINITY, f64::min));
        let again = run_latent_optimization(&g, &c, &v, &ws, &cfg, None).unwrap();
        assert_eq!(r, again);

        let zero = OptConfig { penalties: Penalties { lambda1: 0.0, lambda2: 0.0, ..Default::default() }, ..cfg };
        let r = run_latent_optimization(&g, &c, &v, &ws, &zero, None).unwrap();
        for t in &r.trace {
            assert_eq!(t.total, t.comparator);
        }
    }

    #[test]
    fn huge_latent_weight_pins_the_code() {
        let (g, c) = setup();
        let ws = latent(&g, 9);
        let v = crate::voxel::binarize(&g.synthesize(&ws).unwrap(), 0.0);
        let cfg = OptConfig {
            penalties: Penalties { lambda1: 1e6, ..Default::default() },
            steps: 20,
            step_size: 1e-3,
            ..Default::default()
        };
        let r = run_latent_optimization(&g, &c, &v, &ws, &cfg, None).unwrap();
        assert!(r.w.distance(&ws) < 1e-3);
    }

    #[test]
    fn mapper_training_freezes_networks_and_respects_penalty() {
        let (g, c) = setup();
        let data: Vec<(LatentCode<f64>, SignedGrid<f64>)> = (0..6)
            .map(|s| {
                let w = latent(&g, 30 + s);
                let v = g.synthesize(&w).unwrap();
                (w, v)
            })
            .collect();
        let (gp, cp) = (g.params.data.clone(), c.params.data.clone());
        let cfg = MapperTrainConfig {
            penalties: Penalties { lambda1: 1e4, ..Default::default() },
            epochs: 30,
            batch_size: 3,
            lr: 1e-2,
            seed: 1,
        };
        let (m, log) = train_mapper(&g, &c, &data, &cfg).unwrap();
        assert_eq!(log.epochs.len(), 30);
        assert_eq!(g.params.data, gp);
        assert_eq!(c.params.data, cp);
        for (w, _) in &data {
            let s = m.step(w).unwrap();
            assert!(s.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-2);
        }
    }

    #[test]
    fn penalties_reject_negative_weights() {
        assert!(Penalties { lambda2: -1.0, ..Default::default() }.validate().is_err());
        assert!(Penalties { lambda1: f64::NAN, ..Default::default() }.validate().is_err());
    }
}
