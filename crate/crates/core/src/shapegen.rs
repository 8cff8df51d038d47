//! Procedural screw/bolt solids and the planar-area grabability oracle.

#[cfg(not(feature = "std"))]
#[allow(unused_imports)]
use num_traits::Float;
use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::voxel::VoxelGrid;

/// Head styles times shaft-length bands.
pub const NUM_CLASSES: usize = 9;

/// Thread pitch along the shaft, in unit-domain lengths.
pub const THREAD_PITCH: f64 = 0.06;

/// Pairs whose scores differ by less than this are resampled.
pub const TIE_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadStyle {
    Hex,
    Round,
    Countersunk,
}

impl HeadStyle {
    pub const ALL: [HeadStyle; 3] = [HeadStyle::Hex, HeadStyle::Round, HeadStyle::Countersunk];

    pub fn index(self) -> usize {
        match self {
            HeadStyle::Hex => 0,
            HeadStyle::Round => 1,
            HeadStyle::Countersunk => 2,
        }
    }
}

/// Screw geometry in unit-domain lengths. The shaft runs along axis 2 with
/// the head on top.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScrewSpec {
    pub head_style: HeadStyle,
    /// Circumradius for hex heads.
    pub head_radius: f64,
    pub head_height: f64,
    pub shaft_radius: f64,
    pub shaft_length: f64,
    pub thread_depth: f64,
    pub class_id: usize,
}

impl ScrewSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidScrew(m.into()));
        let finite = [self.head_radius, self.head_height, self.shaft_radius, self.shaft_length, self.thread_depth]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite dimension");
        }
        if !(self.head_radius > 0.0 && self.head_radius < 0.5) {
            return bad("head_radius must lie in (0, 0.5)");
        }
        if !(self.head_height > 0.0 && self.head_height < 0.4) {
            return bad("head_height must lie in (0, 0.4)");
        }
        if !(self.shaft_radius > 0.0 && self.shaft_radius < self.head_radius) {
            return bad("shaft_radius must lie in (0, head_radius)");
        }
        if !(self.shaft_length > 0.0 && self.shaft_length < 0.9) {
            return bad("shaft_length must lie in (0, 0.9)");
        }
        if self.head_height + self.shaft_length > 0.95 {
            return bad("head_height + shaft_length exceeds 0.95");
        }
        if !(self.thread_depth >= 0.0 && self.thread_depth < self.shaft_radius) {
            return bad("thread_depth must lie in [0, shaft_radius)");
        }
        if self.class_id >= NUM_CLASSES {
            return bad("class_id out of range");
        }
        Ok(())
    }

    /// Closed-form solid volume, ignoring threads.
    pub fn analytic_volume(&self) -> f64 {
        let (r, h) = (self.head_radius, self.head_height);
        let head = match self.head_style {
            HeadStyle::Hex => 1.5 * 3f64.sqrt() * r * r * h,
            HeadStyle::Round => PI * r * r * h,
            HeadStyle::Countersunk => {
                let s = self.shaft_radius;
                PI * h / 3.0 * (r * r + r * s + s * s)
            }
        };
        head + PI * self.shaft_radius.powi(2) * self.shaft_length
    }

    fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        let bottom = 0.5 * (1.0 - self.head_height - self.shaft_length);
        let head_start = bottom + self.shaft_length;
        let top = head_start + self.head_height;
        if z < bottom || z > top {
            return false;
        }
        let (dx, dy) = (x - 0.5, y - 0.5);
        let rho2 = dx * dx + dy * dy;
        if z >= head_start {
            let r = self.head_radius;
            match self.head_style {
                HeadStyle::Round => rho2 <= r * r,
                HeadStyle::Hex => {
                    let apothem = r * 3f64.sqrt() / 2.0;
                    [0.0f64, PI / 3.0, 2.0 * PI / 3.0]
                        .iter()
                        .all(|a| (dx * a.cos() + dy * a.sin()).abs() <= apothem)
                }
                HeadStyle::Countersunk => {
                    let t = (z - head_start) / self.head_height;
                    let rr = self.shaft_radius + (r - self.shaft_radius) * t;
                    rho2 <= rr * rr
                }
            }
        } else {
            let phase = 2.0 * PI * (z - bottom) / THREAD_PITCH;
            let rr = self.shaft_radius - self.thread_depth * (0.5 + 0.5 * phase.sin());
            rho2 <= rr * rr
        }
    }
}

/// Rasterizes the screw by testing every cell centre.
pub fn generate_screw(spec: &ScrewSpec, resolution: usize) -> Result<VoxelGrid> {
    spec.validate()?;
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let r = resolution as f64;
    let c = |n: usize| (n as f64 + 0.5) / r;
    Ok(VoxelGrid::from_fn(resolution, |i, j, k| spec.contains(c(i), c(j), c(k))))
}

/// Largest connected planar patch of exposed faces, over the six axis
/// directions, in cell-face units. Faces on the grid boundary count as
/// exposed.
pub fn grabability_score(grid: &VoxelGrid) -> f64 {
    let r = grid.resolution();
    let mut best = 0usize;
    let mut mask = vec![false; r * r];
    let mut seen = vec![false; r * r];
    let mut queue = VecDeque::new();
    for axis in 0..3 {
        for positive in [false, true] {
            for layer in 0..r {
                // (u, v) span the plane orthogonal to `axis`.
                let cell = |u: usize, v: usize, w: usize| match axis {
                    0 => (w, u, v),
                    1 => (u, w, v),
                    _ => (u, v, w),
                };
                let mut any = false;
                for v in 0..r {
                    for u in 0..r {
                        let (i, j, k) = cell(u, v, layer);
                        let exposed = grid.get(i, j, k) && {
                            let next = if positive { layer.checked_add(1).filter(|&n| n < r) } else { layer.checked_sub(1) };
                            match next {
                                None => true,
                                Some(n) => {
                                    let (a, b, c) = cell(u, v, n);
                                    !grid.get(a, b, c)
                                }
                            }
                        };
                        mask[v * r + u] = exposed;
                        any |= exposed;
                    }
                }
                if !any {
                    continue;
                }
                seen.fill(false);
                for start in 0..r * r {
                    if !mask[start] || seen[start] {
                        continue;
                    }
                    seen[start] = true;
                    queue.push_back(start);
                    let mut size = 0usize;
                    while let Some(p) = queue.pop_front() {
                        size += 1;
                        let (u, v) = (p % r, p / r);
                        let mut visit = |q: usize| {
                            if mask[q] && !seen[q] {
                                seen[q] = true;
                                queue.push_back(q);
                            }
                        };
                        if u > 0 {
                            visit(p - 1);
                        }
                        if u + 1 < r {
                            visit(p + 1);
                        }
                        if v > 0 {
                            visit(p - r);
                        }
                        if v + 1 < r {
                            visit(p + r);
                        }
                    }
                    best = best.max(size);
                }
            }
        }
    }
    best as f64
}

/// Two grids and whether the first is the more optimized one.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub first: VoxelGrid,
    pub second: VoxelGrid,
    /// 1 iff `first` has the higher grabability.
    pub label: u8,
}

/// Draws a random screw. Class id encodes `head_style * 3 + shaft band`.
pub fn sample_spec<R: Rng + ?Sized>(rng: &mut R) -> ScrewSpec {
    let style = HeadStyle::ALL[rng.random_range(0..3)];
    let band = rng.random_range(0..3usize);
    let head_radius = rng.random_range(0.14..0.38);
    let head_height = rng.random_range(0.08..0.2);
    let shaft_radius = head_radius * rng.random_range(0.3..0.55);
    let shaft_length = match band {
        0 => rng.random_range(0.2..0.33),
        1 => rng.random_range(0.33..0.46),
        _ => rng.random_range(0.46..0.6),
    };
    let thread_depth = shaft_radius * rng.random_range(0.0..0.3);
    ScrewSpec {
        head_style: style,
        head_radius,
        head_height,
        shaft_radius,
        shaft_length,
        thread_depth,
        class_id: style.index() * 3 + band,
    }
}

/// A labelled screw for generator training.
#[derive(Debug, Clone, PartialEq)]
pub struct Screw {
    pub spec: ScrewSpec,
    pub grid: VoxelGrid,
}

/// `count` random screws, reproducible from `seed`.
pub fn make_screw_dataset(count: usize, seed: u64, resolution: usize) -> Result<Vec<Screw>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let spec = sample_spec(&mut rng);
            Ok(Screw { spec, grid: generate_screw(&spec, resolution)? })
        })
        .collect()
}

/// Labelled pairs. Near ties are resampled and labels alternate by swapping
/// so the set is balanced.
pub fn make_pair_dataset(count: usize, seed: u64, resolution: usize) -> Result<Vec<PairSample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("pair count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = generate_screw(&sample_spec(&mut rng), resolution)?;
        let b = generate_screw(&sample_spec(&mut rng), resolution)?;
        let (sa, sb) = (grabability_score(&a), grabability_score(&b));
        if (sa - sb).abs() < TIE_THRESHOLD {
            continue;
        }
        let want_first_better = out.len() % 2 == 0;
        let (first, second) = if (sa > sb) == want_first_better { (a, b) } else { (b, a) };
        out.push(PairSample { first, second, label: want_first_better as u8 });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hex_spec() -> ScrewSpec {
        ScrewSpec {
            head_style: HeadStyle::Hex,
            head_radius: 0.3,
            head_height: 0.2,
            shaft_radius: 0.1,
            shaft_length: 0.5,
            thread_depth: 0.0,
            class_id: 0,
        }
    }

    #[test]
    fn hex_screw_volume() {
        let spec = hex_spec();
        let g = generate_screw(&spec, 64).unwrap();
        // hex prism 1.5*sqrt(3)*r^2*h plus cylinder pi*r^2*l, in cells.
        let analytic = (1.5 * 3f64.sqrt() * 0.09 * 0.2 + PI * 0.01 * 0.5) * 64f64.powi(3);
        assert!((spec.analytic_volume() * 64f64.powi(3) - analytic).abs() < 1e-9);
        let n = g.occupied() as f64;
        assert!((n - analytic).abs() / analytic < 0.05, "{n} vs {analytic}");
    }

    #[test]
    fn other_styles_match_volume() {
        for style in [HeadStyle::Round, HeadStyle::Countersunk] {
            let spec = ScrewSpec { head_style: style, class_id: style.index() * 3, ..hex_spec() };
            let n = generate_screw(&spec, 64).unwrap().occupied() as f64;
            let v = spec.analytic_volume() * 64f64.powi(3);
            // The 12.8-cell head rasterizes to 12 layers, which costs ~6% here.
            assert!((n - v).abs() / v < 0.08, "{style:?}: {n} vs {v}");
        }
    }

    #[test]
    fn invalid_specs() {
        let s = ScrewSpec { shaft_radius: 0.3, ..hex_spec() };
        assert!(generate_screw(&s, 16).is_err());
        let s = ScrewSpec { head_height: 0.3, shaft_length: 0.7, ..hex_spec() };
        assert!(generate_screw(&s, 16).is_err());
        let s = ScrewSpec { class_id: NUM_CLASSES, ..hex_spec() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn deterministic_generation() {
        assert_eq!(generate_screw(&hex_spec(), 32).unwrap(), generate_screw(&hex_spec(), 32).unwrap());
    }

    #[test]
    fn cube_scores_one_face() {
        for s in [1usize, 3, 7] {
            let g = VoxelGrid::from_fn(16, |i, j, k| (4..4 + s).contains(&i) && (2..2 + s).contains(&j) && (5..5 + s).contains(&k));
            assert_eq!(grabability_score(&g), (s * s) as f64);
        }
        assert_eq!(grabability_score(&VoxelGrid::empty(8)), 0.0);
        assert_eq!(grabability_score(&VoxelGrid::full(5)), 25.0);
    }

    #[test]
    fn larger_head_scores_higher() {
        let small = ScrewSpec { head_radius: 0.2, ..hex_spec() };
        let large = ScrewSpec { head_radius: 0.35, ..hex_spec() };
        let a = grabability_score(&generate_screw(&small, 64).unwrap());
        let b = grabability_score(&generate_screw(&large, 64).unwrap());
        assert!(b > a, "{b} <= {a}");
    }

    #[test]
    fn head_radius_monotone_over_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..8 {
            let base = sample_spec(&mut rng);
            let mut prev = 0.0;
            for step in 0..6 {
                // The sampler keeps shaft_radius <= 0.55 * head_radius.
                let hr = base.shaft_radius / 0.55 + step as f64 * 0.03;
                if hr >= 0.5 {
                    break;
                }
                let spec = ScrewSpec { head_radius: hr, ..base };
                let s = grabability_score(&generate_screw(&spec, 32).unwrap());
                assert!(s >= prev, "{spec:?}: {s} < {prev}");
                prev = s;
            }
        }
    }

    #[test]
    fn score_invariant_under_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..4 {
            let g = generate_screw(&sample_spec(&mut rng), 24).unwrap();
            let s = grabability_score(&g);
            for axis in 0..3 {
                assert_eq!(grabability_score(&g.rotate90(axis)), s);
            }
        }
    }

    #[test]
    fn pair_dataset_small_is_reproducible() {
        let a = make_pair_dataset(1, 42, 16).unwrap();
        let b = make_pair_dataset(1, 42, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        assert!(make_pair_dataset(0, 1, 16).is_err());
    }

    #[test]
    fn pair_labels_follow_oracle() {
        let pairs = make_pair_dataset(60, 3, 24).unwrap();
        for p in &pairs {
            let (a, b) = (grabability_score(&p.first), grabability_score(&p.second));
            assert!((a - b).abs() >= TIE_THRESHOLD);
            assert_eq!(p.label, (a > b) as u8);
            assert_eq!(p.first.resolution(), p.second.resolution());
        }
        let mean = pairs.iter().map(|p| p.label as f64).sum::<f64>() / pairs.len() as f64;
        assert!((0.45..=0.55).contains(&mean));
    }

    #[test]
    fn sampled_specs_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            sample_spec(&mut rng).validate().unwrap();
        }
    }
}
