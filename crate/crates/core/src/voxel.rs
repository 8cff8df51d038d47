//! Voxel grids and the conversions between binary occupancy and the
//! generator's signed `[-1, 1]` range.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;

/// Default grid edge length.
pub const DEFAULT_RESOLUTION: usize = 64;

/// Edge length expected by the slice feature extractor.
pub const UPSAMPLED_SIZE: usize = 128;

/// Flat index of cell `(i, j, k)`; `i` (axis 0) varies fastest.
#[inline]
pub fn cell_index(resolution: usize, i: usize, j: usize, k: usize) -> usize {
    i + resolution * (j + resolution * k)
}

/// Dense cubic binary occupancy grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VoxelGrid {
    resolution: usize,
    data: Vec<bool>,
    pub meta: Option<String>,
}

impl VoxelGrid {
    pub fn empty(resolution: usize) -> Self {
        assert!(resolution > 0, "resolution must be positive");
        Self { resolution, data: vec![false; resolution.pow(3)], meta: None }
    }

    pub fn full(resolution: usize) -> Self {
        let mut g = Self::empty(resolution);
        g.data.fill(true);
        g
    }

    pub fn from_data(resolution: usize, data: Vec<bool>) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::InvalidArgument("resolution must be positive".into()));
        }
        if data.len() != resolution.pow(3) {
            return Err(Error::DimensionMismatch {
                what: "voxel data",
                expected: resolution.pow(3),
                actual: data.len(),
            });
        }
        Ok(Self { resolution, data, meta: None })
    }

    /// Builds a grid by evaluating `f(i, j, k)` for every cell.
    pub fn from_fn(resolution: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut g = Self::empty(resolution);
        for k in 0..resolution {
            for j in 0..resolution {
                for i in 0..resolution {
                    g.data[cell_index(resolution, i, j, k)] = f(i, j, k);
                }
            }
        }
        g
    }

    #[inline]
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    #[inline]
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[cell_index(self.resolution, i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let r = self.resolution;
        self.data[cell_index(r, i, j, k)] = v;
    }

    pub fn occupied(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn with_meta(mut self, meta: impl Into<String>) -> Self {
        self.meta = Some(meta.into());
        self
    }

    /// Intersection over union of the occupied sets; 1 when both are empty.
    pub fn iou(&self, other: &VoxelGrid) -> Result<f64> {
        check_resolution(self.resolution, other.resolution)?;
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// Rotates the grid by 90 degrees about `axis`, mapping the other two
    /// axes `(a, b) -> (b, R - 1 - a)`.
    pub fn rotate90(&self, axis: usize) -> VoxelGrid {
        let r = self.resolution;
        let mut out = VoxelGrid::empty(r);
        out.meta = self.meta.clone();
        for k in 0..r {
            for j in 0..r {
                for i in 0..r {
                    let (ni, nj, nk) = match axis {
                        0 => (i, k, r - 1 - j),
                        1 => (r - 1 - k, j, i),
                        _ => (j, r - 1 - i, k),
                    };
                    out.set(ni, nj, nk, self.get(i, j, k));
                }
            }
        }
        out
    }
}

pub(crate) fn check_resolution(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ResolutionMismatch { expected, actual });
    }
    Ok(())
}

/// Dense cubic grid of reals in `[-1, 1]`, the generator's output domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedGrid<T> {
    resolution: usize,
    data: Vec<T>,
}

impl<T: Real> SignedGrid<T> {
    /// Wraps `data`, rejecting values outside `[-1, 1]` or non-finite.
    pub fn new(resolution: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != resolution.pow(3) {
            return Err(Error::DimensionMismatch {
                what: "signed grid",
                expected: resolution.pow(3),
                actual: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| v.is_nan() || v.abs() > T::one()) {
            return Err(Error::InvalidArgument(alloc::format!(
                "signed grid value {} outside [-1, 1]",
                v.as_f64()
            )));
        }
        Ok(Self { resolution, data })
    }

    pub fn constant(resolution: usize, value: T) -> Self {
        assert!(value.abs() <= T::one());
        Self { resolution, data: vec![value; resolution.pow(3)] }
    }

    #[inline]
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[cell_index(self.resolution, i, j, k)]
    }

    pub fn cast<U: Real>(&self) -> SignedGrid<U> {
        SignedGrid {
            resolution: self.resolution,
            data: self.data.iter().map(|v| U::lit(v.as_f64()).max(-U::one()).min(U::one())).collect(),
        }
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }
}

/// Cell is occupied iff its signed value is strictly above `threshold`.
pub fn binarize<T: Real>(grid: &SignedGrid<T>, threshold: T) -> VoxelGrid {
    VoxelGrid {
        resolution: grid.resolution,
        data: grid.data.iter().map(|&v| v > threshold).collect(),
        meta: None,
    }
}

/// Maps occupancy `0 -> -1`, `1 -> +1`.
pub fn to_signed<T: Real>(grid: &VoxelGrid) -> SignedGrid<T> {
    SignedGrid {
        resolution: grid.resolution,
        data: grid.data.iter().map(|&v| if v { T::one() } else { -T::one() }).collect(),
    }
}

/// Square 2D array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice2d {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Slice2d {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.size + col]
    }

    /// Count of strictly positive pixels.
    pub fn occupied(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }
}

/// Middle slices in the fixed plane order `[axial, coronal, sagittal]`.
///
/// * axial: axis 2 fixed at `R / 2`; rows = axis 1, columns = axis 0
/// * coronal: axis 1 fixed; rows = axis 2, columns = axis 0
/// * sagittal: axis 0 fixed; rows = axis 2, columns = axis 1
pub trait MiddleSlices {
    fn middle_slices(&self) -> [Slice2d; 3];
}

fn slices_from(r: usize, value: impl Fn(usize, usize, usize) -> f32) -> [Slice2d; 3] {
    assert!(r >= 2, "middle slices need resolution >= 2");
    let m = r / 2;
    let plane = |f: &dyn Fn(usize, usize) -> f32| {
        let mut data = Vec::with_capacity(r * r);
        for row in 0..r {
            for col in 0..r {
                data.push(f(row, col));
            }
        }
        Slice2d { size: r, data }
    };
    [
        plane(&|row, col| value(col, row, m)),
        plane(&|row, col| value(col, m, row)),
        plane(&|row, col| value(m, col, row)),
    ]
}

impl MiddleSlices for VoxelGrid {
    fn middle_slices(&self) -> [Slice2d; 3] {
        slices_from(self.resolution, |i, j, k| if self.get(i, j, k) { 1.0 } else { 0.0 })
    }
}

impl<T: Real> MiddleSlices for SignedGrid<T> {
    fn middle_slices(&self) -> [Slice2d; 3] {
        slices_from(self.resolution, |i, j, k| self.get(i, j, k).as_f64() as f32)
    }
}

/// Nearest-neighbour upsampling to 128x128 with the single channel
/// replicated three times. Output is interleaved `(row * 128 + col) * 3 + c`.
pub fn upsample_slice(slice: &Slice2d) -> Result<Vec<f32>> {
    let r = slice.size;
    if r > UPSAMPLED_SIZE {
        return Err(Error::InvalidArgument(alloc::format!(
            "slice size {r} exceeds {UPSAMPLED_SIZE}; downsampling unsupported"
        )));
    }
    if r == 0 {
        return Err(Error::InvalidArgument("empty slice".into()));
    }
    let n = UPSAMPLED_SIZE;
    let mut out = vec![0.0f32; n * n * 3];
    for row in 0..n {
        let sr = row * r / n;
        for col in 0..n {
            let v = slice.data[sr * r + col * r / n];
            let base = (row * n + col) * 3;
            out[base..base + 3].fill(v);
        }
    }
    Ok(out)
}
