//! Two-channel 3D comparator predicting which of two voxel grids is more
//! optimized, and its training on labeled pairs.
//!
//! Convention: `compare(a, b)` is the probability that `a` is the more
//! optimized of the two; label 1 means the first argument is better. The
//! first argument always occupies input channel 0.

#[cfg(not(feature = "std"))]
#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gan::sigmoid;
use crate::nn::{global_avg, global_avg_backward, lrelu_backward_inplace, lrelu_inplace, Conv3d, ConvCache, Linear, Vol};
use crate::optim::{cosine_lr, Adam};
use crate::params::ParamSet;
use crate::real::Real;
use crate::shapegen::PairSample;
use crate::voxel::{to_signed, SignedGrid};

/// Probabilities are clamped to `[P_CLAMP, 1 - P_CLAMP]` inside the loss.
pub const P_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct ComparatorArch {
    /// Output width of each stride-2 block.
    pub widths: Vec<usize>,
}

impl Default for ComparatorArch {
    fn default() -> Self {
        Self { widths: vec![16, 32, 64, 96, 128] }
    }
}

#[derive(Debug, Clone)]
pub struct Comparator<T> {
    pub arch: ComparatorArch,
    pub params: ParamSet<T>,
    convs: Vec<Conv3d>,
    head: Linear,
}

pub type ComparatorParams<T> = Comparator<T>;

#[derive(Debug, Clone)]
pub struct CompCache<T> {
    resolution: usize,
    convs: Vec<(ConvCache<T>, Vec<T>)>,
    last: ([usize; 3], usize),
    pooled: Vec<T>,
}

impl<T: Real> Comparator<T> {
    pub fn new(arch: ComparatorArch, seed: u64) -> Result<Self> {
        if arch.widths.is_empty() || arch.widths.contains(&0) {
            return Err(Error::InvalidArgument("comparator widths must be non-empty and positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut cin = 2;
        let convs = arch
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv3d::new(&mut ps, &format!("c{i}"), cin, w, 3, 2, true, &mut rng);
                cin = w;
                c
            })
            .collect();
        let head = Linear::new(&mut ps, "head", cin, 1, Some(0.0), 1.0, &mut rng);
        Ok(Self { arch, params: ps, convs, head })
    }

    pub fn input_channels(&self) -> usize {
        self.convs[0].in_channels
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Real>(&self) -> Comparator<U> {
        Comparator { arch: self.arch.clone(), params: self.params.cast(), convs: self.convs.clone(), head: self.head }
    }

    /// Network logit for the channel-concatenated pair.
    pub fn forward(&self, v1: &[T], v2: &[T], resolution: usize) -> Result<(T, CompCache<T>)> {
        let n = resolution.pow(3);
        if v1.len() != n || v2.len() != n {
            return Err(Error::DimensionMismatch { what: "comparator input", expected: n, actual: v1.len().max(v2.len()) });
        }
        let p = &self.params.data;
        let mut data = Vec::with_capacity(2 * n);
        data.extend_from_slice(v1);
        data.extend_from_slice(v2);
        let mut x = Vol::from_data(2, [resolution; 3], data);
        let mut convs = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (mut y, cache) = conv.forward(p, &x);
            lrelu_inplace(&mut y.data);
            convs.push((cache, y.data.clone()));
            x = y;
        }
        let pooled = global_avg(&x);
        let logit = self.head.forward(p, &pooled)[0];
        Ok((logit, CompCache { resolution, convs, last: (x.dims, x.channels), pooled }))
    }

    /// Accumulates parameter gradients into `g` (when given) and returns the
    /// gradients with respect to both inputs when `want_dx`.
    pub fn backward(&self, cache: &CompCache<T>, dlogit: T, g: Option<&mut [T]>, want_dx: bool) -> Option<(Vec<T>, Vec<T>)> {
        let p = &self.params.data;
        let mut g = g;
        let dpool = self.head.backward(p, g.as_deref_mut(), &cache.pooled, &[dlogit]);
        let (dims, channels) = cache.last;
        let mut dy = global_avg_backward(channels, dims, &dpool).data;
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let (cc, y) = &cache.convs[i];
            lrelu_backward_inplace(y, &mut dy);
            let need = want_dx || i > 0;
            dy = conv.backward(p, g.as_deref_mut(), cc, &dy, need)?;
        }
        let n = cache.resolution.pow(3);
        let second = dy.split_off(n);
        Some((dy, second))
    }

    pub fn logit(&self, v1: &SignedGrid<T>, v2: &SignedGrid<T>) -> Result<T> {
        if v1.resolution() != v2.resolution() {
            return Err(Error::ResolutionMismatch { expected: v1.resolution(), actual: v2.resolution() });
        }
        Ok(self.forward(v1.data(), v2.data(), v1.resolution())?.0)
    }

    /// Probability that `v1` is the more optimized component.
    pub fn compare(&self, v1: &SignedGrid<T>, v2: &SignedGrid<T>) -> Result<T> {
        self.logit(v1, v2).map(sigmoid)
    }
}

/// Binary cross-entropy `-[y ln p + (1-y) ln(1-p)]` with `p` clamped.
pub fn comparator_loss<T: Real>(p: T, y_true: u8) -> T {
    let c = T::lit(P_CLAMP);
    let p = p.max(c).min(T::one() - c);
    if y_true != 0 {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

/// Loss and its derivative with respect to the logit.
pub fn comparator_loss_logit<T: Real>(logit: T, y_true: u8) -> (T, T) {
    let p = sigmoid(logit);
    let c = T::lit(P_CLAMP);
    let grad = if p < c || p > T::one() - c { T::zero() } else { p - T::lit(y_true as f64) };
    (comparator_loss(p, y_true), grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub swap_augment: bool,
    pub seed: u64,
}

impl Default for CompTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 16, lr: 2e-3, val_fraction: 0.2, swap_augment: true, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompEpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// `None` when the validation split is empty.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompTrainLog {
    pub records: Vec<CompEpochRecord>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Seeded shuffle of `0..n` split into `(train, validation)`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * val_fraction.clamp(0.0, 1.0)).round() as usize;
    let n_val = if n_val >= n { n.saturating_sub(1) } else { n_val };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Fraction of pairs whose predicted side matches the label.
pub fn pair_accuracy<T: Real>(comp: &Comparator<T>, pairs: &[PairSample], indices: &[usize]) -> Result<f64> {
    let mut hits = 0usize;
    for &i in indices {
        let pair = &pairs[i];
        let p = comp.compare(&to_signed(&pair.first), &to_signed(&pair.second))?;
        hits += ((p > T::lit(0.5)) == (pair.label == 1)) as usize;
    }
    Ok(hits as f64 / indices.len().max(1) as f64)
}

/// Trains a fresh comparator with Adam (cosine-decayed step) on mean pair
/// cross-entropy.
pub fn train_comparator<T: Real>(
    arch: &ComparatorArch,
    config: &CompTrainConfig,
    pairs: &[PairSample],
) -> Result<(Comparator<T>, CompTrainLog)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no training pairs".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let res = pairs[0].first.resolution();
    for p in pairs {
        for g in [&p.first, &p.second] {
            if g.resolution() != res {
                return Err(Error::ResolutionMismatch { expected: res, actual: g.resolution() });
            }
        }
    }
    let mut comp = Comparator::<T>::new(arch.clone(), config.seed)?;
    let (train_idx, val_idx) = split_indices(pairs.len(), config.val_fraction, config.seed ^ 0x5b11);
    let signed: Vec<(Vec<T>, Vec<T>)> = pairs
        .iter()
        .map(|p| (to_signed::<T>(&p.first).into_data(), to_signed::<T>(&p.second).into_data()))
        .collect();

    // (pair index, swapped)
    let mut samples: Vec<(usize, bool)> = train_idx.iter().map(|&i| (i, false)).collect();
    if config.swap_augment {
        samples.extend(train_idx.iter().map(|&i| (i, true)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::<T>::new(comp.params.count(), config.lr, 0.9, 0.999);
    let mut log = CompTrainLog { records: Vec::new(), train_indices: train_idx, val_indices: val_idx };

    let total_steps = config.epochs * samples.len().div_ceil(config.batch_size);
    let mut step = 0;
    for epoch in 0..config.epochs {
        samples.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        for batch in samples.chunks(config.batch_size) {
            let mut g = comp.params.zeros_like();
            let scale = T::one() / T::from_usize(batch.len()).unwrap();
            for &(i, swapped) in batch {
                let (a, b) = &signed[i];
                let (x1, x2, y) = if swapped { (b, a, 1 - pairs[i].label) } else { (a, b, pairs[i].label) };
                let (logit, cache) = comp.forward(x1, x2, res)?;
                let (loss, dl) = comparator_loss_logit(logit, y);
                loss_sum += loss.as_f64();
                hits += ((logit > T::zero()) == (y == 1)) as usize;
                comp.backward(&cache, dl * scale, Some(&mut g), false);
            }
            opt.step_with_lr(&mut comp.params.data, &g, cosine_lr(config.lr, step, total_steps));
            step += 1;
        }
        let train_loss = loss_sum / samples.len().max(1) as f64;
        if !train_loss.is_finite() || !comp.params.all_finite() {
            return Err(Error::NonFinite {
                stage: "train_comparator",
                step: epoch,
                snapshot: format!("train_loss={train_loss} params_finite={}", comp.params.all_finite()),
            });
        }
        let val_accuracy =
            if log.val_indices.is_empty() { None } else { Some(pair_accuracy(&comp, pairs, &log.val_indices)?) };
        log::info!("comparator epoch {epoch}: loss {train_loss:.4} val_acc {val_accuracy:?}");
        log.records.push(CompEpochRecord {
            epoch,
            train_loss,
            train_accuracy: hits as f64 / samples.len().max(1) as f64,
            val_accuracy,
        });
    }
    Ok((comp, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapegen::make_pair_dataset;
    use crate::voxel::VoxelGrid;
    use rand::Rng;

    fn small() -> ComparatorArch {
        ComparatorArch { widths: vec![4, 8, 8] }
    }

    #[test]
    fn zero_weights_give_one_half() {
        let mut c = Comparator::<f64>::new(ComparatorArch::default(), 1).unwrap();
        assert_eq!(c.input_channels(), 2);
        c.params.data.fill(0.0);
        let a = SignedGrid::constant(8, 0.3);
        let b = SignedGrid::constant(8, -1.0);
        assert_eq!(c.compare(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn resolution_mismatch_is_an_error() {
        let c = Comparator::<f32>::new(small(), 1).unwrap();
        let r = c.compare(&SignedGrid::constant(8, 0.0), &SignedGrid::constant(16, 0.0));
        assert!(matches!(r, Err(Error::ResolutionMismatch { .. })));
    }

    #[test]
    fn loss_closed_forms() {
        assert!((comparator_loss(0.5f64, 1) - core::f64::consts::LN_2).abs() < 1e-12);
        assert!((comparator_loss(0.9f64, 1) - 0.10536051565782628).abs() < 1e-12);
        assert!((comparator_loss(1.0f64, 0) - 16.11809565095832).abs() < 1e-9);
        assert!((comparator_loss(0.0f64, 1) - 16.11809565095832).abs() < 1e-9);
    }

    #[test]
    fn logit_gradient_is_p_minus_y() {
        for &l in &[-3.0f64, -0.2, 0.0, 0.7, 4.0] {
            for y in [0u8, 1] {
                let (_, g) = comparator_loss_logit(l, y);
                let h = 1e-6;
                let fd = (comparator_loss_logit(l + h, y).0 - comparator_loss_logit(l - h, y).0) / (2.0 * h);
                assert!((g - (sigmoid(l) - y as f64)).abs() < 1e-15);
                assert!((fd - g).abs() < 1e-6, "{l} {y}: {fd} vs {g}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = Comparator::<f64>::new(small(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = 8;
        let v1: Vec<f64> = (0..512).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let v2: Vec<f64> = (0..512).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let (_, cache) = c.forward(&v1, &v2, r).unwrap();
        let mut g = c.params.zeros_like();
        let (d1, d2) = c.backward(&cache, 1.0, Some(&mut g), true).unwrap();
        let eps = 1e-6;
        let f = |c: &Comparator<f64>, a: &[f64], b: &[f64]| c.forward(a, b, r).unwrap().0;
        for _ in 0..12 {
            let i = rng.random_range(0..c.params.count());
            let mut cp = c.clone();
            cp.params.data[i] += eps;
            let lp = f(&cp, &v1, &v2);
            cp.params.data[i] -= 2.0 * eps;
            let fd = (lp - f(&cp, &v1, &v2)) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
        for _ in 0..8 {
            let i = rng.random_range(0..512);
            let (mut a, mut b) = (v1.clone(), v1.clone());
            a[i] += eps;
            b[i] -= eps;
            let fd = (f(&c, &a, &v2) - f(&c, &b, &v2)) / (2.0 * eps);
            assert!((fd - d1[i]).abs() < 1e-6 * (1.0 + fd.abs()));
            let (mut a, mut b) = (v2.clone(), v2.clone());
            a[i] += eps;
            b[i] -= eps;
            let fd = (f(&c, &v1, &a) - f(&c, &v1, &b)) / (2.0 * eps);
            assert!((fd - d2[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    fn pair(label: u8) -> PairSample {
        let big = VoxelGrid::from_fn(8, |i, j, k| (1..7).contains(&i) && (1..7).contains(&j) && k > 3);
        let small = VoxelGrid::from_fn(8, |i, j, k| (3..5).contains(&i) && (3..5).contains(&j) && k > 1);
        if label == 1 {
            PairSample { first: big, second: small, label }
        } else {
            PairSample { first: small, second: big, label }
        }
    }

    #[test]
    fn memorizes_a_single_pair() {
        let pairs = vec![pair(1); 4];
        let cfg = CompTrainConfig { epochs: 60, batch_size: 4, lr: 1e-2, val_fraction: 0.0, swap_augment: false, seed: 2 };
        let (_, log) = train_comparator::<f32>(&small(), &cfg, &pairs).unwrap();
        let last = log.records.last().unwrap();
        assert!(last.train_loss < 0.01, "{}", last.train_loss);
        assert!(last.val_accuracy.is_none());
    }

    #[test]
    fn learns_a_trivial_split_and_inverted_labels() {
        let pairs: Vec<PairSample> = (0..10).map(|i| pair((i % 2) as u8)).collect();
        let inverted: Vec<PairSample> = pairs.iter().map(|p| PairSample { label: 1 - p.label, ..p.clone() }).collect();
        let cfg = CompTrainConfig { epochs: 30, batch_size: 4, lr: 1e-2, val_fraction: 0.2, swap_augment: true, seed: 5 };
        let (c, log) = train_comparator::<f32>(&small(), &cfg, &pairs).unwrap();
        assert_eq!(log.records.last().unwrap().val_accuracy, Some(1.0));
        let all: Vec<usize> = (0..pairs.len()).collect();
        let (ci, _) = train_comparator::<f32>(&small(), &cfg, &inverted).unwrap();
        assert!(pair_accuracy(&ci, &pairs, &all).unwrap() <= 0.1);
        for p in &pairs {
            let (a, b) = (to_signed::<f32>(&p.first), to_signed::<f32>(&p.second));
            let s = c.compare(&a, &b).unwrap() + c.compare(&b, &a).unwrap();
            assert!((s - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = split_indices(1000, 0.2, 9);
        assert_eq!((t.len(), v.len()), (800, 200));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(split_indices(1000, 0.2, 9), (t, v));
    }

    #[test]
    fn rejects_empty_and_mixed_resolutions() {
        let cfg = CompTrainConfig::default();
        assert!(train_comparator::<f32>(&small(), &cfg, &[]).is_err());
        let mut pairs = make_pair_dataset(2, 1, 8).unwrap();
        pairs[1].second = VoxelGrid::empty(16);
        assert!(matches!(train_comparator::<f32>(&small(), &cfg, &pairs), Err(Error::ResolutionMismatch { .. })));
    }
}
