//! Middle-slice export as 8-bit grayscale PGM (P5).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use voxopt_core::voxel::{MiddleSlices, Slice2d, VoxelGrid};

use crate::voxb;

pub const PLANE_NAMES: [&str; 3] = ["axial", "coronal", "sagittal"];

/// Pixel values in `[0, 1]` map linearly to `0..=255`; values outside are clamped.
pub fn encode_pgm(slice: &Slice2d) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", slice.size, slice.size).into_bytes();
    out.extend(slice.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Parses a binary PGM into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!("truncated PGM header");
        }
        fields.push(std::str::from_utf8(&bytes[start..pos])?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        bail!("only 8-bit P5 PGM is supported");
    }
    let (w, h): (usize, usize) = (fields[1].parse()?, fields[2].parse()?);
    let pixels = bytes.get(pos + 1..).context("truncated PGM")?.to_vec();
    if pixels.len() != w * h {
        bail!("PGM has {} pixels, expected {}", pixels.len(), w * h);
    }
    Ok((w, h, pixels))
}

pub fn render_grid(grid: &VoxelGrid, out_dir: &Path) -> Result<[PathBuf; 3]> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let slices = grid.middle_slices();
    let mut paths: [PathBuf; 3] = Default::default();
    for (p, (slice, name)) in slices.iter().zip(PLANE_NAMES).enumerate() {
        let path = out_dir.join(format!("{name}.pgm"));
        fs::write(&path, encode_pgm(slice)).with_context(|| format!("writing {}", path.display()))?;
        paths[p] = path;
    }
    Ok(paths)
}

/// Writes `axial.pgm`, `coronal.pgm` and `sagittal.pgm` for a VOXB file.
pub fn render_slices(grid_path: &Path, out_dir: &Path) -> Result<[PathBuf; 3]> {
    render_grid(&voxb::read(grid_path)?, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let s = Slice2d { size: 2, data: vec![0.0, 1.0, 0.5, 2.0] };
        let (w, h, px) = decode_pgm(&encode_pgm(&s)).unwrap();
        assert_eq!((w, h), (2, 2));
        assert_eq!(px, vec![0, 255, 128, 255]);
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
    }
}
