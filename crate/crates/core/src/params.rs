//! Flat parameter storage shared by every network.
//!
//! Each network registers named tensors in a [`ParamSet`]; layers keep a
//! [`Slot`] into the flat buffer. Gradients use a buffer of the same length,
//! which keeps optimizers, checkpoints and finite-difference checks uniform.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;

/// Location of one tensor inside a flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

impl Slot {
    #[inline]
    pub fn get<'a, T>(&self, buf: &'a [T]) -> &'a [T] {
        &buf[self.offset..self.offset + self.len]
    }

    #[inline]
    pub fn get_mut<'a, T>(&self, buf: &'a mut [T]) -> &'a mut [T] {
        &mut buf[self.offset..self.offset + self.len]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub slot: Slot,
}

/// Initial value of a freshly registered tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Standard normal scaled by the given factor.
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub data: Vec<T>,
    pub entries: Vec<ParamEntry>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { data: Vec::new(), entries: Vec::new() }
    }

    pub fn register<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Slot {
        let len: usize = shape.iter().product();
        let slot = Slot { offset: self.data.len(), len };
        match init {
            Init::Zeros => self.data.extend(core::iter::repeat_n(T::zero(), len)),
            Init::Constant(c) => self.data.extend(core::iter::repeat_n(T::lit(c), len)),
            Init::Normal(scale) => {
                for _ in 0..len {
                    let z: f64 = StandardNormal.sample(rng);
                    self.data.push(T::lit(z * scale));
                }
            }
        }
        self.entries.push(ParamEntry { name: name.to_string(), shape: shape.to_vec(), slot });
        slot
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.data.len()
    }

    pub fn zeros_like(&self) -> Vec<T> {
        vec![T::zero(); self.data.len()]
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            entries: self.entries.clone(),
        }
    }

    /// Replace all values, checking that names and shapes line up.
    pub fn load(&mut self, entries: &[(String, Vec<usize>, Vec<T>)]) -> Result<()> {
        if entries.len() != self.entries.len() {
            return Err(Error::ParamMismatch(alloc::format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                entries.len()
            )));
        }
        for (mine, (name, shape, values)) in self.entries.iter().zip(entries) {
            if &mine.name != name || &mine.shape != shape || values.len() != mine.slot.len {
                return Err(Error::ParamMismatch(alloc::format!(
                    "tensor {} {:?} does not match {} {:?}",
                    name,
                    shape,
                    mine.name,
                    mine.shape
                )));
            }
            mine.slot.get_mut(&mut self.data).copy_from_slice(values);
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
