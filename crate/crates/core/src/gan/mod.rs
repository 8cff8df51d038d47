//! Style-based 3D generator and projection discriminator.

mod discriminator;
mod generator;
mod modconv;
mod train;

pub use discriminator::{DiscCache, Discriminator, DiscriminatorParams};
pub use generator::{GenCache, Generator, GeneratorParams};
pub use modconv::ModConv;
pub use train::{r1_penalty, train_gan, GanTrainConfig, GanTrainLog, GanTrainOutput, GanTrainRecord};

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;

/// Architecture descriptor shared by the generator and the discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct GanArch {
    pub resolution: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub num_classes: usize,
    pub mapping_layers: usize,
    /// Feature width per block, from 4^3 up to `resolution`^3.
    pub channels: Vec<usize>,
    pub mbstd_group: usize,
    pub mapping_lr_mult: f64,
    /// Fixed pre-tanh output gain.
    pub output_gain: f64,
}

impl GanArch {
    /// Default configuration: 64^3 output, widths (128, 96, 64, 32, 16).
    pub fn desk() -> Self {
        Self {
            resolution: 64,
            z_dim: 128,
            w_dim: 128,
            num_classes: 9,
            mapping_layers: 4,
            channels: alloc::vec![128, 96, 64, 32, 16],
            mbstd_group: 4,
            mapping_lr_mult: 0.01,
            output_gain: 1.0,
        }
    }

    /// Preset sized to roughly 2.1M trainable parameters per network.
    pub fn full_scale() -> Self {
        Self {
            resolution: 64,
            z_dim: 256,
            w_dim: 256,
            num_classes: 9,
            mapping_layers: 4,
            channels: alloc::vec![96, 112, 80, 48, 24],
            ..Self::desk()
        }
    }

    /// Small configuration for quick runs at the given resolution.
    pub fn compact(resolution: usize, base: usize) -> Self {
        let blocks = Self::block_count(resolution).expect("resolution must be 4 * 2^n");
        let channels = (0..blocks).map(|b| (base >> b).max(4)).collect();
        Self {
            resolution,
            z_dim: 32,
            w_dim: 32,
            num_classes: 9,
            mapping_layers: 4,
            channels,
            mbstd_group: 4,
            mapping_lr_mult: 0.01,
            output_gain: 1.0,
        }
    }

    fn block_count(resolution: usize) -> Option<usize> {
        if resolution < 4 || !resolution.is_power_of_two() {
            return None;
        }
        Some(resolution.trailing_zeros() as usize - 1)
    }

    /// Block resolutions `4, 8, ..., resolution`.
    pub fn block_resolutions(&self) -> Vec<usize> {
        (0..self.channels.len()).map(|b| 4 << b).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = Self::block_count(self.resolution)
            .ok_or_else(|| Error::InvalidArgument(alloc::format!("resolution {} is not 4 * 2^n", self.resolution)))?;
        if self.channels.len() != blocks {
            return Err(Error::DimensionMismatch { what: "channel widths", expected: blocks, actual: self.channels.len() });
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.num_classes == 0 || self.mapping_layers == 0 {
            return Err(Error::InvalidArgument("latent sizes, classes and mapping depth must be positive".into()));
        }
        if self.channels.contains(&0) || self.mbstd_group == 0 {
            return Err(Error::InvalidArgument("channel widths and group size must be positive".into()));
        }
        Ok(())
    }
}

/// Input latent with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentZ<T> {
    pub values: Vec<T>,
    pub class_id: usize,
}

/// Draws `z ~ N(0, I)` of the given dimension.
pub fn sample_z<T: Real, R: Rng + ?Sized>(rng: &mut R, dim: usize, class_id: usize) -> LatentZ<T> {
    LatentZ { values: (0..dim).map(|_| T::lit(StandardNormal.sample(rng))).collect(), class_id }
}

/// A point in the intermediate latent space W.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    pub values: Vec<T>,
}

impl<T: Real> LatentCode<T> {
    pub fn new(values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("latent code has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn cast<U: Real>(&self) -> LatentCode<U> {
        LatentCode { values: self.values.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    pub fn distance(&self, other: &Self) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            .sqrt()
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_presets_hit_the_budget() {
        let arch = GanArch::full_scale();
        let g = Generator::<f32>::new(arch.clone(), 0).unwrap().count_parameters() as f64;
        let d = Discriminator::<f32>::new(arch, 0).unwrap().count_parameters() as f64;
        assert!((g / 2.1e6 - 1.0).abs() <= 0.2, "generator {g}");
        assert!((d / 2.1e6 - 1.0).abs() <= 0.2, "discriminator {d}");
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(0.0f64) - core::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(-800.0f64), 0.0);
        assert_eq!(softplus(800.0f64), 800.0);
        assert_eq!(sigmoid(-800.0f64), 0.0);
        assert_eq!(sigmoid(800.0f64), 1.0);
        assert!((sigmoid(0.3f64) + sigmoid(-0.3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn compact_widths_halve_down_to_four() {
        let a = GanArch::compact(32, 32);
        assert_eq!(a.channels, alloc::vec![32, 16, 8, 4]);
        assert_eq!(a.block_resolutions(), alloc::vec![4, 8, 16, 32]);
        assert!(a.validate().is_ok());
        assert!(GanArch { resolution: 24, ..a }.validate().is_err());
    }
}
