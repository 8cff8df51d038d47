//! Slice-wise Fréchet distance between real and synthesized voxel sets.
//!
//! The three middle slices of every grid are upsampled to 128x128x3,
//! embedded by a [`FeatureExtractor`], and each plane gets its own Gaussian
//! Fréchet distance.

#[cfg(not(feature = "std"))]
#[allow(unused_imports)]
use num_traits::Float;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gan::{sample_z, Generator};
use crate::real::Real;
use crate::voxel::{binarize, upsample_slice, MiddleSlices, VoxelGrid, UPSAMPLED_SIZE};

/// Diagonal jitter added when the covariance product is not numerically PSD.
pub const COV_REGULARIZATION: f64 = 1e-6;
const SYMMETRY_TOL: f64 = 1e-9;

/// Gaussian statistics of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::DimensionMismatch { what: "covariance", expected: d * d, actual: cov.len() });
        }
        if count < 2 {
            return Err(Error::InvalidArgument("feature statistics need at least 2 samples".into()));
        }
        if mean.iter().chain(&cov).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature statistics".into()));
        }
        for i in 0..d {
            for j in 0..i {
                if (cov[i * d + j] - cov[j * d + i]).abs() > SYMMETRY_TOL {
                    return Err(Error::InvalidArgument("covariance is not symmetric".into()));
                }
            }
        }
        Ok(Self { mean, cov, count })
    }

    /// Sample mean and unbiased covariance.
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::InvalidArgument(alloc::format!("need at least 2 feature vectors, got {n}")));
        }
        let d = features[0].len();
        if let Some(f) = features.iter().find(|f| f.len() != d) {
            return Err(Error::DimensionMismatch { what: "feature vector", expected: d, actual: f.len() });
        }
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for f in features {
            for i in 0..d {
                let di = f[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (f[j] - mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Self::new(mean, cov, n)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.cov);
        (&m + m.transpose()) * 0.5
    }
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `Tr((Σa Σb)^{1/2})` computed as `Tr((Sa Σb Sa)^{1/2})` with `Sa = Σa^{1/2}`.
/// Returns `None` when the product has clearly negative eigenvalues.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    let s = psd_sqrt(a.clone());
    let m = &s * b * &s;
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |acc, l| acc.max(l.abs()));
    if eig.eigenvalues.iter().any(|&l| l < -COV_REGULARIZATION * scale) {
        return None;
    }
    Some(eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum())
}

/// Fréchet distance `|μa - μb|² + Tr(Σa + Σb - 2 (Σa Σb)^{1/2})`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { what: "feature dimension", expected: a.dim(), actual: b.dim() });
    }
    for s in [a, b] {
        if s.mean.iter().chain(&s.cov).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite feature statistics".into()));
        }
    }
    let (ca, cb) = (a.cov_matrix(), b.cov_matrix());
    let mean_term = DVector::from_column_slice(&a.mean).metric_distance(&DVector::from_column_slice(&b.mean)).powi(2);
    let mut tr = ca.trace() + cb.trace();
    let cross = match trace_sqrt_product(&ca, &cb) {
        Some(t) => t,
        None => {
            log::warn!("covariance product not PSD; adding {COV_REGULARIZATION} to the diagonal");
            let eye = DMatrix::<f64>::identity(a.dim(), a.dim()) * COV_REGULARIZATION;
            tr += 2.0 * a.dim() as f64 * COV_REGULARIZATION;
            trace_sqrt_product(&(&ca + &eye), &(&cb + &eye))
                .ok_or_else(|| Error::InvalidArgument("matrix square root failed after regularization".into()))?
        }
    };
    let d = mean_term + tr - 2.0 * cross;
    if d < 0.0 {
        log::warn!("negative Fréchet residue {d:e} clamped to zero");
        return Ok(0.0);
    }
    Ok(d)
}

/// Embeds a 128x128x3 interleaved image into a feature vector.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, image: &[f32]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone)]
struct Conv2d {
    cin: usize,
    cout: usize,
    weight: Vec<f32>,
}

/// Fixed-seed random convolutional embedding: four stride-2 3x3 conv layers
/// with leaky ReLU, widths (8, 16, 32, 64), then global average pooling.
#[derive(Debug, Clone)]
pub struct RandomConvExtractor {
    seed: u64,
    layers: Vec<Conv2d>,
}

impl RandomConvExtractor {
    pub const WIDTHS: [usize; 4] = [8, 16, 32, 64];

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let layers = Self::WIDTHS
            .iter()
            .map(|&cout| {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let weight = (0..cout * cin * 9)
                    .map(|_| { let v: f64 = StandardNormal.sample(&mut rng); (v * std) as f32 })
                    .collect();
                let l = Conv2d { cin, cout, weight };
                cin = cout;
                l
            })
            .collect();
        Self { seed, layers }
    }
}

impl Default for RandomConvExtractor {
    fn default() -> Self {
        Self::new(0)
    }
}

fn conv2d_s2(layer: &Conv2d, x: &[f32], size: usize) -> (Vec<f32>, usize) {
    let out = size.div_ceil(2);
    let mut y = vec![0.0f32; layer.cout * out * out];
    for o in 0..layer.cout {
        let yo = &mut y[o * out * out..(o + 1) * out * out];
        for c in 0..layer.cin {
            let xc = &x[c * size * size..(c + 1) * size * size];
            for ky in 0..3 {
                for kx in 0..3 {
                    let w = layer.weight[((o * layer.cin + c) * 3 + ky) * 3 + kx];
                    for oy in 0..out {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= size as isize {
                            continue;
                        }
                        let row = &xc[iy as usize * size..(iy as usize + 1) * size];
                        let dst = &mut yo[oy * out..(oy + 1) * out];
                        let lo = usize::from(kx == 0);
                        for (ox, d) in dst.iter_mut().enumerate().skip(lo) {
                            let ix = 2 * ox + kx - 1;
                            if ix < size {
                                *d += w * row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    for v in &mut y {
        if *v < 0.0 {
            *v *= 0.2;
        }
    }
    (y, out)
}

impl FeatureExtractor for RandomConvExtractor {
    fn id(&self) -> String {
        alloc::format!("random-conv-{}", self.seed)
    }

    fn dim(&self) -> usize {
        *Self::WIDTHS.last().unwrap()
    }

    fn embed(&self, image: &[f32]) -> Result<Vec<f64>> {
        let n = UPSAMPLED_SIZE;
        if image.len() != n * n * 3 {
            return Err(Error::DimensionMismatch { what: "image", expected: n * n * 3, actual: image.len() });
        }
        let mut x = vec![0.0f32; 3 * n * n];
        for (p, px) in image.chunks_exact(3).enumerate() {
            for c in 0..3 {
                x[c * n * n + p] = px[c];
            }
        }
        let mut size = n;
        for layer in &self.layers {
            let (y, s) = conv2d_s2(layer, &x, size);
            x = y;
            size = s;
        }
        let area = (size * size) as f64;
        Ok(x.chunks_exact(size * size).map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / area).collect())
    }
}

/// Feature statistics of a set of upsampled slices.
pub fn extract_features(slices: &[Vec<f32>], extractor: &dyn FeatureExtractor) -> Result<FeatureStats> {
    if slices.len() < 2 {
        return Err(Error::InvalidArgument(alloc::format!("need at least 2 slices, got {}", slices.len())));
    }
    let feats = slices.iter().map(|s| extractor.embed(s)).collect::<Result<Vec<_>>>()?;
    FeatureStats::from_features(&feats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidReport {
    pub axial: f64,
    pub coronal: f64,
    pub sagittal: f64,
    pub extractor_id: String,
    pub real_count: usize,
    pub fake_count: usize,
}

/// Upsampled middle slices of every grid, grouped by plane.
pub fn plane_images(grids: &[VoxelGrid]) -> Result<[Vec<Vec<f32>>; 3]> {
    let mut planes: [Vec<Vec<f32>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for g in grids {
        for (p, s) in g.middle_slices().iter().enumerate() {
            planes[p].push(upsample_slice(s)?);
        }
    }
    Ok(planes)
}

/// Per-plane distances between two grid sets.
pub fn slice_fid_sets(real: &[VoxelGrid], fake: &[VoxelGrid], extractor: &dyn FeatureExtractor) -> Result<FidReport> {
    let (pr, pf) = (plane_images(real)?, plane_images(fake)?);
    let mut d = [0.0; 3];
    for p in 0..3 {
        let a = extract_features(&pr[p], extractor)?;
        let b = extract_features(&pf[p], extractor)?;
        d[p] = frechet_distance(&a, &b)?;
    }
    Ok(FidReport {
        axial: d[0],
        coronal: d[1],
        sagittal: d[2],
        extractor_id: extractor.id(),
        real_count: real.len(),
        fake_count: fake.len(),
    })
}

/// `per_label` binarized samples for every entry of `labels`, in order.
pub fn synthesize_for_labels<T: Real>(gen: &Generator<T>, labels: &[usize], per_label: usize, seed: u64) -> Result<Vec<VoxelGrid>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(labels.len() * per_label);
    for &label in labels {
        for _ in 0..per_label {
            let z = sample_z::<T, _>(&mut rng, gen.arch.z_dim, label);
            let w = gen.map_latent(&z)?;
            out.push(binarize(&gen.synthesize(&w)?, T::zero()));
        }
    }
    Ok(out)
}

/// Slice-wise FID of `gen` against `real`, synthesizing `per_label` samples
/// per entry of `labels` (one label per real record).
pub fn slice_fid<T: Real>(
    real: &[VoxelGrid],
    gen: &Generator<T>,
    labels: &[usize],
    per_label: usize,
    extractor: &dyn FeatureExtractor,
    seed: u64,
) -> Result<FidReport> {
    if real.is_empty() || per_label == 0 {
        return Err(Error::InvalidArgument("slice_fid needs real grids and per_label >= 1".into()));
    }
    let fake = synthesize_for_labels(gen, labels, per_label, seed)?;
    slice_fid_sets(real, &fake, extractor)
}

impl FidReport {
    pub fn planes(&self) -> [(&'static str, f64); 3] {
        [("axial", self.axial), ("coronal", self.coronal), ("sagittal", self.sagittal)]
    }
}

impl core::fmt::Display for FidReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s: Vec<String> = self.planes().iter().map(|(n, v)| alloc::format!("{n}={v:.6}")).collect();
        write!(f, "{} ({}; real {}, fake {})", s.join(" "), self.extractor_id, self.real_count, self.fake_count)
    }
}
