//! Whitespace-separated text manifests. Relative paths resolve against the
//! manifest's directory; blank lines and `#` comments are skipped.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use voxopt_core::shapegen::PairSample;
use voxopt_core::voxel::VoxelGrid;

use crate::voxb;

fn records(path: &Path, fields: usize) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<String> = line.split_whitespace().map(String::from).collect();
        if parts.len() != fields {
            bail!("{}:{}: expected {fields} fields, found {}", path.display(), n + 1, parts.len());
        }
        out.push(parts);
    }
    Ok(out)
}

fn resolve(manifest: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new("")).join(p)
    }
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))
}

/// Pair records `path_first path_second label`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub first: PathBuf,
    pub second: PathBuf,
    pub label: u8,
}

pub fn read_pairs(path: &Path) -> Result<Vec<PairRecord>> {
    records(path, 3)?
        .into_iter()
        .map(|r| {
            let label: u8 = r[2].parse().with_context(|| format!("bad label {:?}", r[2]))?;
            if label > 1 {
                bail!("pair label must be 0 or 1, got {label}");
            }
            Ok(PairRecord { first: resolve(path, &r[0]), second: resolve(path, &r[1]), label })
        })
        .collect()
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairSample>> {
    read_pairs(path)?
        .into_iter()
        .map(|r| Ok(PairSample { first: voxb::read(&r.first)?, second: voxb::read(&r.second)?, label: r.label }))
        .collect()
}

pub fn write_pairs(path: &Path, records: &[(String, String, u8)]) -> Result<()> {
    write_lines(path, &records.iter().map(|(a, b, l)| format!("{a} {b} {l}")).collect::<Vec<_>>())
}

/// Shape records `path class_id`.
pub fn read_shapes(path: &Path) -> Result<Vec<(PathBuf, usize)>> {
    records(path, 2)?
        .into_iter()
        .map(|r| Ok((resolve(path, &r[0]), r[1].parse().with_context(|| format!("bad class id {:?}", r[1]))?)))
        .collect()
}

pub fn load_shapes(path: &Path) -> Result<Vec<(VoxelGrid, usize)>> {
    read_shapes(path)?.into_iter().map(|(p, c)| Ok((voxb::read(&p)?, c))).collect()
}

pub fn write_shapes(path: &Path, records: &[(String, usize)]) -> Result<()> {
    write_lines(path, &records.iter().map(|(p, c)| format!("{p} {c}")).collect::<Vec<_>>())
}

/// Latent records `latent_path voxb_path` pairing a code with its source grid.
pub fn read_latents(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    Ok(records(path, 2)?.into_iter().map(|r| (resolve(path, &r[0]), resolve(path, &r[1]))).collect())
}

pub fn write_latents(path: &Path, records: &[(String, String)]) -> Result<()> {
    write_lines(path, &records.iter().map(|(a, b)| format!("{a} {b}")).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_round_trip_with_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("pairs.txt");
        write_pairs(&m, &[("a.voxb".into(), "/x/b.voxb".into(), 1)]).unwrap();
        let r = read_pairs(&m).unwrap();
        assert_eq!(r[0].first, dir.path().join("a.voxb"));
        assert_eq!(r[0].second, PathBuf::from("/x/b.voxb"));
        assert_eq!(r[0].label, 1);
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.txt");
        fs::write(&m, "# header\n\na b 2\n").unwrap();
        assert!(read_pairs(&m).is_err());
        fs::write(&m, "a b\n").unwrap();
        assert!(read_pairs(&m).is_err());
        assert!(format!("{:#}", read_shapes(&m).unwrap_err()).contains("class id"));
    }
}
