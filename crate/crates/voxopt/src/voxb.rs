//! VOXB voxel files: magic `VOXB`, version byte, little-endian `u32`
//! resolution, then occupancy bits packed LSB-first in x-fastest order.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use voxopt_core::voxel::VoxelGrid;

pub const MAGIC: &[u8; 4] = b"VOXB";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 9;

pub fn encode(grid: &VoxelGrid) -> Vec<u8> {
    let cells = grid.data();
    let mut out = Vec::with_capacity(HEADER_LEN + cells.len().div_ceil(8));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(grid.resolution() as u32).to_le_bytes());
    for chunk in cells.chunks(8) {
        out.push(chunk.iter().enumerate().fold(0u8, |b, (i, &v)| b | ((v as u8) << i)));
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<VoxelGrid> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        bail!("not a VOXB file (bad magic bytes)");
    }
    if bytes[4] != VERSION {
        bail!("unsupported VOXB version {}", bytes[4]);
    }
    let r = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let n = r.checked_pow(3).context("VOXB resolution overflows")?;
    let body = &bytes[HEADER_LEN..];
    if r == 0 || body.len() != n.div_ceil(8) {
        bail!("VOXB payload has {} bytes, expected {} for resolution {r}", body.len(), n.div_ceil(8));
    }
    let data = (0..n).map(|i| body[i / 8] >> (i % 8) & 1 == 1).collect();
    Ok(VoxelGrid::from_data(r, data)?)
}

pub fn write(path: &Path, grid: &VoxelGrid) -> Result<()> {
    fs::write(path, encode(grid)).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> Result<VoxelGrid> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_layout() {
        let g = VoxelGrid::from_fn(3, |i, j, k| (i + 2 * j + 3 * k) % 4 == 0);
        let bytes = encode(&g);
        assert_eq!(bytes.len(), 9 + 4);
        assert_eq!(&bytes[..4], b"VOXB");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 3);
        assert_eq!(bytes[9] & 1, g.get(0, 0, 0) as u8);
        assert_eq!(bytes[9] >> 1 & 1, g.get(1, 0, 0) as u8);
        assert_eq!(decode(&bytes).unwrap(), g);
    }

    #[test]
    fn rejects_bad_input() {
        let mut bytes = encode(&VoxelGrid::full(4));
        assert!(decode(&bytes[..12]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
        let mut bytes = encode(&VoxelGrid::full(4));
        bytes[4] = 9;
        assert!(decode(&bytes).is_err());
    }
}
