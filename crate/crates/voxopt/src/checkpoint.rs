//! Self-describing weight container shared by every network.
//!
//! Layout: magic `VXCK`, version byte, little-endian `u32` header length, a
//! JSON header (kind, architecture, tensor names and shapes, step, seed),
//! then all tensors as little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voxopt_core::comparator::{Comparator, ComparatorArch};
use voxopt_core::gan::{Discriminator, GanArch, Generator};
use voxopt_core::optimize::Mapper;
use voxopt_core::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"VXCK";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub arch: serde_json::Value,
    pub tensors: Vec<TensorMeta>,
    pub step: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub values: Vec<Vec<f32>>,
}

impl Container {
    pub fn new(kind: &str, arch: serde_json::Value, step: u64, seed: u64) -> Self {
        Self { header: Header { kind: kind.into(), arch, tensors: Vec::new(), step, seed }, values: Vec::new() }
    }

    pub fn push_params(&mut self, prefix: &str, params: &ParamSet<f32>) {
        for e in &params.entries {
            self.header.tensors.push(TensorMeta { name: format!("{prefix}{}", e.name), shape: e.shape.clone() });
            self.values.push(e.slot.get(&params.data).to_vec());
        }
    }

    /// Loads every tensor whose name starts with `prefix` into `params`.
    pub fn load_params(&self, prefix: &str, params: &mut ParamSet<f32>) -> Result<()> {
        let entries: Vec<(String, Vec<usize>, Vec<f32>)> = self
            .header
            .tensors
            .iter()
            .zip(&self.values)
            .filter_map(|(m, v)| m.name.strip_prefix(prefix).map(|n| (n.to_string(), m.shape.clone(), v.clone())))
            .collect();
        params.load(&entries)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(9 + header.len() + 4 * self.values.iter().map(Vec::len).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&u32::try_from(header.len())?.to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.values.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        ensure!(bytes.len() >= 9 && &bytes[..4] == MAGIC, "not a checkpoint (bad magic bytes)");
        ensure!(bytes[4] == VERSION, "unsupported checkpoint version {}", bytes[4]);
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let hbytes = bytes.get(9..9 + hlen).context("truncated checkpoint header")?;
        let header: Header = serde_json::from_slice(hbytes).context("parsing checkpoint header")?;
        let mut data = bytes[9 + hlen..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        ensure!(bytes.len() - 9 - hlen == 4 * total, "checkpoint payload does not match its header");
        let values = header.tensors.iter().map(|t| data.by_ref().take(t.shape.iter().product()).collect()).collect();
        Ok(Self { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let c = Self::from_bytes(&bytes).with_context(|| format!("decoding {}", path.display()))?;
        Ok((c, sha256_hex(&bytes)))
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.header.kind != kind {
            bail!("expected a {kind} checkpoint, found {}", self.header.kind);
        }
        Ok(())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanArchDesc {
    pub resolution: usize,
    pub z_dim: usize,
    pub w_dim: usize,
    pub num_classes: usize,
    pub mapping_layers: usize,
    pub channels: Vec<usize>,
    pub mbstd_group: usize,
    pub mapping_lr_mult: f64,
    pub output_gain: f64,
}

impl From<&GanArch> for GanArchDesc {
    fn from(a: &GanArch) -> Self {
        Self {
            resolution: a.resolution,
            z_dim: a.z_dim,
            w_dim: a.w_dim,
            num_classes: a.num_classes,
            mapping_layers: a.mapping_layers,
            channels: a.channels.clone(),
            mbstd_group: a.mbstd_group,
            mapping_lr_mult: a.mapping_lr_mult,
            output_gain: a.output_gain,
        }
    }
}

impl From<GanArchDesc> for GanArch {
    fn from(d: GanArchDesc) -> Self {
        Self {
            resolution: d.resolution,
            z_dim: d.z_dim,
            w_dim: d.w_dim,
            num_classes: d.num_classes,
            mapping_layers: d.mapping_layers,
            channels: d.channels,
            mbstd_group: d.mbstd_group,
            mapping_lr_mult: d.mapping_lr_mult,
            output_gain: d.output_gain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ComparatorDesc {
    widths: Vec<usize>,
    resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MapperDesc {
    w_dim: usize,
}

const GEN: &str = "generator.";
const DISC: &str = "discriminator.";

pub fn gan_container(gen: &Generator<f32>, disc: &Discriminator<f32>, step: u64, seed: u64) -> Result<Container> {
    let mut c = Container::new("gan", serde_json::to_value(GanArchDesc::from(&gen.arch))?, step, seed);
    c.push_params(GEN, &gen.params);
    c.push_params(DISC, &disc.params);
    Ok(c)
}

/// Rebuilds both networks of a GAN checkpoint.
pub fn gan_from(c: &Container) -> Result<(Generator<f32>, Discriminator<f32>)> {
    c.expect_kind("gan")?;
    let arch: GanArch = serde_json::from_value::<GanArchDesc>(c.header.arch.clone())?.into();
    let mut gen = Generator::new(arch.clone(), 0)?;
    let mut disc = Discriminator::new(arch, 0)?;
    c.load_params(GEN, &mut gen.params)?;
    c.load_params(DISC, &mut disc.params)?;
    Ok((gen, disc))
}

pub fn comparator_container(comp: &Comparator<f32>, resolution: usize, step: u64, seed: u64) -> Result<Container> {
    let desc = ComparatorDesc { widths: comp.arch.widths.clone(), resolution };
    let mut c = Container::new("comparator", serde_json::to_value(desc)?, step, seed);
    c.push_params("", &comp.params);
    Ok(c)
}

/// Returns the comparator and the resolution it was trained at.
pub fn comparator_from(c: &Container) -> Result<(Comparator<f32>, usize)> {
    c.expect_kind("comparator")?;
    let desc: ComparatorDesc = serde_json::from_value(c.header.arch.clone())?;
    let mut comp = Comparator::new(ComparatorArch { widths: desc.widths }, 0)?;
    c.load_params("", &mut comp.params)?;
    Ok((comp, desc.resolution))
}

pub fn mapper_container(mapper: &Mapper<f32>, step: u64, seed: u64) -> Result<Container> {
    let mut c = Container::new("mapper", serde_json::to_value(MapperDesc { w_dim: mapper.w_dim() })?, step, seed);
    c.push_params("", &mapper.params);
    Ok(c)
}

pub fn mapper_from(c: &Container) -> Result<Mapper<f32>> {
    c.expect_kind("mapper")?;
    let desc: MapperDesc = serde_json::from_value(c.header.arch.clone())?;
    let mut m = Mapper::new(desc.w_dim, 0);
    c.load_params("", &mut m.params)?;
    Ok(m)
}
