//! Binary STL ingestion and cell-centre rasterization.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::voxel::VoxelGrid;

const STL_HEADER: usize = 80;
const STL_RECORD: usize = 50;

/// Jitter applied to a scanline that hits a triangle edge or vertex exactly,
/// as a fraction of the unit domain.
const RAY_JITTER: f64 = 1e-7;

pub type Point3 = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    /// Validates index ranges and that at least one triangle exists.
    pub fn new(vertices: Vec<Point3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::EmptyMesh);
        }
        for (t, tri) in triangles.iter().enumerate() {
            for &index in tri {
                if index >= vertices.len() {
                    return Err(Error::BadTriangleIndex { triangle: t, index, count: vertices.len() });
                }
            }
        }
        Ok(Self { vertices, triangles })
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Point3, Point3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in &self.vertices {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    /// True when every undirected edge is shared by exactly two triangles.
    pub fn is_closed(&self) -> bool {
        let mut edges: BTreeMap<(usize, usize), u32> = BTreeMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        edges.values().all(|&c| c == 2)
    }

    /// Serializes to binary STL with zero normals and attribute bytes.
    pub fn to_stl_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; STL_HEADER];
        out.extend_from_slice(&(self.triangles.len() as u32).to_le_bytes());
        for t in &self.triangles {
            out.extend_from_slice(&[0u8; 12]);
            for &vi in t {
                for a in 0..3 {
                    out.extend_from_slice(&(self.vertices[vi][a] as f32).to_le_bytes());
                }
            }
            out.extend_from_slice(&[0u8; 2]);
        }
        out
    }
}

fn stl_err(offset: usize, message: &str) -> Error {
    Error::Stl { offset, message: message.to_string() }
}

/// Parses a binary STL stream, merging bit-identical vertices.
pub fn parse_stl(bytes: &[u8]) -> Result<TriangleMesh> {
    if bytes.len() < STL_HEADER {
        return Err(stl_err(bytes.len(), "expected 80-byte header"));
    }
    if bytes.len() < STL_HEADER + 4 {
        return Err(stl_err(STL_HEADER, "expected 4-byte count"));
    }
    let count = u32::from_le_bytes(bytes[STL_HEADER..STL_HEADER + 4].try_into().unwrap()) as usize;
    let body = STL_HEADER + 4;
    let expected = count
        .checked_mul(STL_RECORD)
        .and_then(|n| n.checked_add(body))
        .ok_or_else(|| stl_err(STL_HEADER, "triangle count overflows"))?;
    if bytes.len() < expected {
        let complete = (bytes.len() - body) / STL_RECORD;
        return Err(stl_err(
            body + complete * STL_RECORD,
            &alloc::format!("truncated triangle record {complete} of {count}"),
        ));
    }
    if bytes.len() > expected {
        return Err(stl_err(
            expected,
            &alloc::format!("triangle count mismatch: header declares {count}, stream holds more data"),
        ));
    }
    let mut index: BTreeMap<[u32; 3], usize> = BTreeMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::with_capacity(count);
    for t in 0..count {
        let rec = &bytes[body + t * STL_RECORD..body + (t + 1) * STL_RECORD];
        let mut tri = [0usize; 3];
        for (v, slot) in tri.iter_mut().enumerate() {
            let base = 12 + v * 12;
            let mut key = [0u32; 3];
            for (a, k) in key.iter_mut().enumerate() {
                let o = base + a * 4;
                *k = u32::from_le_bytes(rec[o..o + 4].try_into().unwrap());
            }
            *slot = *index.entry(key).or_insert_with(|| {
                vertices.push(key.map(|b| f32::from_bits(b) as f64));
                vertices.len() - 1
            });
        }
        triangles.push(tri);
    }
    TriangleMesh::new(vertices, triangles)
}

/// Outcome of [`voxelize`], carrying the conditions worth a warning.
#[derive(Debug, Clone, PartialEq)]
pub struct Voxelized {
    pub grid: VoxelGrid,
    pub non_watertight: bool,
    pub zero_volume: bool,
}

/// Maps model coordinates into the unit domain: uniform scale, centred, with
/// a one-cell margin on the longest axis.
#[derive(Debug, Clone, Copy)]
struct Normalization {
    scale: f64,
    offset: [f64; 3],
}

impl Normalization {
    fn fit(lo: Point3, hi: Point3, resolution: usize) -> Option<Self> {
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max);
        if extent.is_nan() || extent <= 0.0 || !extent.is_finite() {
            return None;
        }
        let r = resolution as f64;
        let scale = (r - 2.0) / r / extent;
        let mut offset = [0.0; 3];
        for a in 0..3 {
            let center = 0.5 * (lo[a] + hi[a]);
            offset[a] = 0.5 - center * scale;
        }
        Some(Self { scale, offset })
    }

    fn apply(&self, p: Point3) -> Point3 {
        [
            p[0] * self.scale + self.offset[0],
            p[1] * self.scale + self.offset[1],
            p[2] * self.scale + self.offset[2],
        ]
    }
}

/// Where a +x ray through `(y, z)` crosses the triangle, if it does.
/// `Err(())` signals an exact edge or vertex hit.
fn ray_hit(tri: &[Point3; 3], y: f64, z: f64) -> core::result::Result<Option<f64>, ()> {
    let [a, b, c] = tri;
    let edge = |p: &Point3, q: &Point3| (q[1] - p[1]) * (z - p[2]) - (q[2] - p[2]) * (y - p[1]);
    let e0 = edge(a, b);
    let e1 = edge(b, c);
    let e2 = edge(c, a);
    let area = e0 + e1 + e2;
    if area == 0.0 {
        // Triangle is parallel to the ray.
        return Ok(None);
    }
    let inside = (e0 > 0.0 && e1 > 0.0 && e2 > 0.0) || (e0 < 0.0 && e1 < 0.0 && e2 < 0.0);
    if inside {
        // Barycentric weights: e1 belongs to a, e2 to b, e0 to c.
        let x = (e1 * a[0] + e2 * b[0] + e0 * c[0]) / area;
        return Ok(Some(x));
    }
    let touches = (e0 == 0.0 || e1 == 0.0 || e2 == 0.0)
        && (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0 || e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0);
    if touches {
        Err(())
    } else {
        Ok(None)
    }
}

/// Cell `(i, j, k)` is occupied iff its centre lies inside the normalized
/// mesh, decided by crossing parity of a ray cast along +x.
pub fn voxelize(mesh: &TriangleMesh, resolution: usize) -> Result<Voxelized> {
    if mesh.triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if resolution == 0 {
        return Err(Error::InvalidArgument("resolution must be positive".into()));
    }
    let non_watertight = !mesh.is_closed();
    if non_watertight {
        log::warn!("voxelizing a mesh that is not watertight; parity test may misclassify cells");
    }
    let (lo, hi) = mesh.bounds();
    let zero_extent = (0..3).any(|a| (hi[a] - lo[a]).is_nan() || hi[a] - lo[a] <= 0.0);
    let norm = match Normalization::fit(lo, hi, resolution) {
        Some(n) if !zero_extent => n,
        _ => {
            log::warn!("mesh encloses no volume; emitting an empty grid");
            return Ok(Voxelized { grid: VoxelGrid::empty(resolution), non_watertight, zero_volume: true });
        }
    };
    let tris: Vec<[Point3; 3]> = mesh
        .triangles
        .iter()
        .map(|t| [norm.apply(mesh.vertices[t[0]]), norm.apply(mesh.vertices[t[1]]), norm.apply(mesh.vertices[t[2]])])
        .collect();

    let r = resolution as f64;
    let mut grid = VoxelGrid::empty(resolution);
    let mut hits: Vec<f64> = Vec::new();
    for k in 0..resolution {
        for j in 0..resolution {
            let y0 = (j as f64 + 0.5) / r;
            let z0 = (k as f64 + 0.5) / r;
            let mut attempt = 0u32;
            loop {
                let jitter = RAY_JITTER * attempt as f64;
                let (y, z) = (y0 + jitter, z0 + 0.75 * jitter);
                hits.clear();
                let mut tie = false;
                for tri in &tris {
                    match ray_hit(tri, y, z) {
                        Ok(Some(x)) => hits.push(x),
                        Ok(None) => {}
                        Err(()) => {
                            tie = true;
                            break;
                        }
                    }
                }
                if !tie || attempt >= 8 {
                    break;
                }
                attempt += 1;
            }
            hits.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for i in 0..resolution {
                let x = (i as f64 + 0.5) / r;
                let beyond = hits.len() - hits.partition_point(|&h| h <= x);
                if beyond % 2 == 1 {
                    grid.set(i, j, k, true);
                }
            }
        }
    }
    Ok(Voxelized { grid, non_watertight, zero_volume: false })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use core::f64::consts::PI;

    /// Unit cube `[0,1]^3` as 12 outward-facing triangles.
    pub(crate) fn cube_mesh(lo: f64, hi: f64) -> TriangleMesh {
        let mut v = Vec::new();
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    let c = |b: usize| if b == 1 { hi } else { lo };
                    v.push([c(i), c(j), c(k)]);
                }
            }
        }
        let idx = |i: usize, j: usize, k: usize| i + 2 * j + 4 * k;
        // -z, +z, -y, +y, -x, +x faces
        let t = vec![
            [idx(0, 0, 0), idx(0, 1, 0), idx(1, 1, 0)],
            [idx(0, 0, 0), idx(1, 1, 0), idx(1, 0, 0)],
            [idx(0, 0, 1), idx(1, 0, 1), idx(1, 1, 1)],
            [idx(0, 0, 1), idx(1, 1, 1), idx(0, 1, 1)],
            [idx(0, 0, 0), idx(1, 0, 0), idx(1, 0, 1)],
            [idx(0, 0, 0), idx(1, 0, 1), idx(0, 0, 1)],
            [idx(0, 1, 0), idx(0, 1, 1), idx(1, 1, 1)],
            [idx(0, 1, 0), idx(1, 1, 1), idx(1, 1, 0)],
            [idx(0, 0, 0), idx(0, 0, 1), idx(0, 1, 1)],
            [idx(0, 0, 0), idx(0, 1, 1), idx(0, 1, 0)],
            [idx(1, 0, 0), idx(1, 1, 0), idx(1, 1, 1)],
            [idx(1, 0, 0), idx(1, 1, 1), idx(1, 0, 1)],
        ];
        TriangleMesh::new(v, t).unwrap()
    }

    fn sphere_mesh(radius: f64, stacks: usize, slices: usize) -> TriangleMesh {
        let mut v = vec![[0.0, 0.0, radius]];
        for s in 1..stacks {
            let th = PI * s as f64 / stacks as f64;
            for l in 0..slices {
                let ph = 2.0 * PI * l as f64 / slices as f64;
                v.push([radius * th.sin() * ph.cos(), radius * th.sin() * ph.sin(), radius * th.cos()]);
            }
        }
        v.push([0.0, 0.0, -radius]);
        let bottom = v.len() - 1;
        let ring = |s: usize, l: usize| 1 + (s - 1) * slices + l % slices;
        let mut t = Vec::new();
        for l in 0..slices {
            t.push([0, ring(1, l), ring(1, l + 1)]);
            t.push([bottom, ring(stacks - 1, l + 1), ring(stacks - 1, l)]);
        }
        for s in 1..stacks - 1 {
            for l in 0..slices {
                t.push([ring(s, l), ring(s + 1, l), ring(s + 1, l + 1)]);
                t.push([ring(s, l), ring(s + 1, l + 1), ring(s, l + 1)]);
            }
        }
        TriangleMesh::new(v, t).unwrap()
    }

    #[test]
    fn single_triangle_stl() {
        let mesh = TriangleMesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        let bytes = mesh.to_stl_bytes();
        assert_eq!(bytes.len(), 134);
        let parsed = parse_stl(&bytes).unwrap();
        assert_eq!(parsed.triangles.len(), 1);
        assert_eq!(parsed.vertices.len(), 3);
    }

    #[test]
    fn truncated_after_header() {
        let err = parse_stl(&[0u8; 80]).unwrap_err();
        match err {
            Error::Stl { offset, message } => {
                assert_eq!(offset, 80);
                assert!(message.contains("expected 4-byte count"));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn count_mismatches() {
        let cube = cube_mesh(0.0, 1.0).to_stl_bytes();
        let short = &cube[..cube.len() - 10];
        assert!(matches!(parse_stl(short), Err(Error::Stl { offset, .. }) if offset == 84 + 11 * 50));
        let mut long = cube.clone();
        long.extend_from_slice(&[0u8; 50]);
        assert!(parse_stl(&long).is_err());
        let mut zero = vec![0u8; 84];
        zero[80] = 0;
        assert_eq!(parse_stl(&zero), Err(Error::EmptyMesh));
    }

    #[test]
    fn cube_stl_bounds() {
        let parsed = parse_stl(&cube_mesh(0.0, 1.0).to_stl_bytes()).unwrap();
        assert_eq!(parsed.triangles.len(), 12);
        assert_eq!(parsed.vertices.len(), 8);
        assert_eq!(parsed.bounds(), ([0.0; 3], [1.0; 3]));
        assert!(parsed.is_closed());
    }

    #[test]
    fn cube_voxel_fraction() {
        let out = voxelize(&cube_mesh(0.0, 1.0), 64).unwrap();
        assert!(!out.non_watertight && !out.zero_volume);
        // Brute-force point-in-box over cell centres of the normalized cube.
        let lo = 1.0 / 64.0;
        let hi = 63.0 / 64.0;
        let mut expected = 0usize;
        for k in 0..64 {
            for j in 0..64 {
                for i in 0..64 {
                    let c = |n: usize| (n as f64 + 0.5) / 64.0;
                    if [c(i), c(j), c(k)].iter().all(|&v| v > lo && v < hi) {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(expected, 62 * 62 * 62);
        assert_eq!(out.grid.occupied(), expected);
    }

    #[test]
    fn sphere_voxel_volume() {
        let r = 64usize;
        let out = voxelize(&sphere_mesh(1.0, 48, 96), r).unwrap();
        assert!(!out.non_watertight);
        let radius_cells = (r as f64 - 2.0) / 2.0;
        let analytic = 4.0 / 3.0 * PI * radius_cells.powi(3);
        let mut brute = 0usize;
        for k in 0..r {
            for j in 0..r {
                for i in 0..r {
                    let d = |n: usize| n as f64 + 0.5 - r as f64 / 2.0;
                    if d(i).powi(2) + d(j).powi(2) + d(k).powi(2) < radius_cells.powi(2) {
                        brute += 1;
                    }
                }
            }
        }
        let n = out.grid.occupied() as f64;
        assert!((n - analytic).abs() / analytic < 0.05, "{n} vs {analytic}");
        assert!((brute as f64 - analytic).abs() / analytic < 0.05);
    }

    #[test]
    fn empty_and_flat_meshes() {
        assert_eq!(TriangleMesh::new(vec![[0.0; 3]], vec![]), Err(Error::EmptyMesh));
        let flat = TriangleMesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        let out = voxelize(&flat, 16).unwrap();
        assert!(out.zero_volume);
        assert!(out.non_watertight);
        assert_eq!(out.grid.occupied(), 0);
    }

    #[test]
    fn nested_cubes_are_monotone() {
        // Inner cube is fully inside the outer; include a tiny anchor so both
        // meshes share the same normalization.
        let outer = cube_mesh(0.0, 1.0);
        let mut inner = cube_mesh(0.2, 0.7);
        let anchor = cube_mesh(0.0, 1.0);
        let base = inner.vertices.len();
        inner.vertices.extend(anchor.vertices.iter().copied());
        // Anchor triangles are added twice with opposite orientation so they
        // cancel in the parity count.
        for t in &anchor.triangles {
            inner.triangles.push([t[0] + base, t[1] + base, t[2] + base]);
            inner.triangles.push([t[0] + base, t[2] + base, t[1] + base]);
        }
        let a = voxelize(&outer, 32).unwrap().grid;
        let b = voxelize(&inner, 32).unwrap().grid;
        assert!(b.occupied() > 0);
        for (x, y) in b.data().iter().zip(a.data()) {
            assert!(!*x || *y);
        }
    }
}
