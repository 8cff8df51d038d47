//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`, `# comment`, or `include <path>`; included files
//! are read in place, relative to the including file, and later keys override
//! earlier ones. Path values resolve against the file that sets them,
//! except `out_dir`, which is taken as given. Every key and its default is listed in
//! `configs/defaults.conf`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::Serialize;
use voxopt_core::comparator::{ComparatorArch, CompTrainConfig};
use voxopt_core::gan::{GanArch, GanTrainConfig};
use voxopt_core::inversion::{Divergence, InversionConfig};
use voxopt_core::optimize::{MapperTrainConfig, OptConfig, Penalties};

const MAX_INCLUDE_DEPTH: usize = 16;

/// Raw key/value pairs with the file each value came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    pub values: BTreeMap<String, (String, PathBuf)>,
}

impl RawConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut raw = Self::default();
        raw.read_file(path, 0)?;
        Ok(raw)
    }

    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut raw = Self::default();
        raw.read_text(text, origin, 0)?;
        Ok(raw)
    }

    fn read_file(&mut self, path: &Path, depth: usize) -> Result<()> {
        ensure!(depth <= MAX_INCLUDE_DEPTH, "include depth exceeds {MAX_INCLUDE_DEPTH} at {}", path.display());
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.read_text(&text, path, depth)
    }

    fn read_text(&mut self, text: &str, origin: &Path, depth: usize) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = || format!("{}:{}", origin.display(), n + 1);
            if let Some(rest) = line.strip_prefix("include ") {
                let target = Path::new(rest.trim().trim_matches('"'));
                let target = if target.is_absolute() {
                    target.to_path_buf()
                } else {
                    origin.parent().unwrap_or(Path::new("")).join(target)
                };
                self.read_file(&target, depth + 1).with_context(at)?;
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| anyhow!("{}: expected `key = value`", at()))?;
            let (k, v) = (k.trim(), v.trim());
            ensure!(!k.is_empty(), "{}: empty key", at());
            self.values.insert(k.to_string(), (v.to_string(), origin.to_path_buf()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), (value.to_string(), PathBuf::from("<override>")));
    }
}

/// Consumes keys from a [`RawConfig`]; whatever is left at the end is unknown.
struct Fields {
    raw: BTreeMap<String, (String, PathBuf)>,
}

impl Fields {
    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.opt(key)? {
            Some(v) => Ok(v),
            None => Ok(default),
        }
    }

    fn opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw.remove(key) {
            None => Ok(None),
            Some((v, _)) if v.is_empty() => Ok(None),
            Some((v, origin)) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("{}: bad value {v:?} for {key}: {e}", origin.display())),
        }
    }

    fn list(&mut self, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.raw.remove(key) {
            None => Ok(default.to_vec()),
            Some((v, origin)) => v
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| anyhow!("{}: bad list {v:?} for {key}: {e}", origin.display())),
        }
    }

    fn path(&mut self, key: &str) -> Result<Option<PathBuf>> {
        match self.raw.remove(key) {
            None => Ok(None),
            Some((v, _)) if v.is_empty() => Ok(None),
            Some((v, origin)) => {
                let p = PathBuf::from(&v);
                Ok(Some(if p.is_absolute() { p } else { origin.parent().unwrap_or(Path::new("")).join(p) }))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Latent,
    Mapper,
    Both,
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "latent" => Ok(Self::Latent),
            "mapper" => Ok(Self::Mapper),
            "both" => Ok(Self::Both),
            _ => Err("expected latent, mapper or both".into()),
        }
    }
}

impl Method {
    pub fn latent(self) -> bool {
        matches!(self, Self::Latent | Self::Both)
    }

    pub fn mapper(self) -> bool {
        matches!(self, Self::Mapper | Self::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataConfig {
    pub resolution: usize,
    pub screws: usize,
    pub pairs: usize,
    pub eval_screws: usize,
    /// Existing `path class_id` manifest used instead of generated screws.
    pub screws_manifest: Option<PathBuf>,
    /// Existing pair manifest used instead of generated pairs.
    pub pairs_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GanConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub mapping_layers: usize,
    pub mbstd_group: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub apa: bool,
    pub apa_target: f64,
    pub apa_step: f64,
    pub apa_interval: usize,
    pub apa_max: f64,
    /// Pretrained checkpoint; skips training when set.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparatorConfig {
    pub widths: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub val_fraction: f64,
    pub swap_augment: bool,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InvertConfig {
    pub steps: usize,
    pub lr: f64,
    pub mean_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizeConfig {
    pub method: Method,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub squared_penalties: bool,
    pub mask: Option<PathBuf>,
    pub steps: usize,
    pub step_size: f64,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapperConfig {
    /// Training screws inverted to build the mapper's training set.
    pub train_count: usize,
    /// Extra training latents sampled from the mapping network, paired with
    /// their own binarized syntheses.
    pub sampled_latents: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FidConfig {
    pub per_label: usize,
    pub extractor_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub gan: GanConfig,
    pub comparator: ComparatorConfig,
    pub invert: InvertConfig,
    pub optimize: OptimizeConfig,
    pub mapper: MapperConfig,
    pub fid: FidConfig,
}

/// Stage offsets mixed into the run seed.
#[derive(Debug, Clone, Copy)]
pub enum Stage {
    Screws = 1,
    Pairs,
    EvalScrews,
    Gan,
    Comparator,
    Invert,
    Optimize,
    Mapper,
    Fid,
}

impl PipelineConfig {
    pub fn from_raw(raw: RawConfig) -> Result<Self> {
        let mut f = Fields { raw: raw.values };
        let seed: u64 = f.opt("seed")?.ok_or_else(|| anyhow!("config has no `seed`; unseeded runs are not allowed"))?;
        let gd = GanTrainConfig::default();
        let cd = CompTrainConfig::default();
        let inv = InversionConfig::default();
        let od = OptConfig::default();
        let pd = Penalties::default();
        let md = MapperTrainConfig::default();
        let resolution = f.get("data.resolution", 32)?;
        let cfg = Self {
            seed,
            out_dir: f.get("out_dir", PathBuf::from("runs/desk"))?,
            data: DataConfig {
                resolution,
                screws: f.get("data.screws", 200)?,
                pairs: f.get("data.pairs", 1000)?,
                eval_screws: f.get("data.eval_screws", 20)?,
                screws_manifest: f.path("data.screws_manifest")?,
                pairs_manifest: f.path("data.pairs_manifest")?,
            },
            gan: GanConfig {
                z_dim: f.get("gan.z_dim", 32)?,
                w_dim: f.get("gan.w_dim", 32)?,
                channels: f.list("gan.channels", &[32, 16, 8, 4])?,
                num_classes: f.get("gan.num_classes", 9)?,
                mapping_layers: f.get("gan.mapping_layers", 4)?,
                mbstd_group: f.get("gan.mbstd_group", 4)?,
                steps: f.get("gan.steps", 1000)?,
                batch_size: f.get("gan.batch_size", 4)?,
                lr_g: f.get("gan.lr_g", gd.lr_g)?,
                lr_d: f.get("gan.lr_d", gd.lr_d)?,
                r1_gamma: f.get("gan.r1_gamma", gd.r1_gamma)?,
                r1_interval: f.get("gan.r1_interval", gd.r1_interval)?,
                apa: f.get("gan.apa", gd.apa_enabled)?,
                apa_target: f.get("gan.apa_target", gd.apa_target)?,
                apa_step: f.get("gan.apa_step", gd.apa_step)?,
                apa_interval: f.get("gan.apa_interval", gd.apa_interval)?,
                apa_max: f.get("gan.apa_max", gd.apa_max)?,
                checkpoint: f.path("gan.checkpoint")?,
            },
            comparator: ComparatorConfig {
                widths: f.list("comparator.widths", &ComparatorArch::default().widths)?,
                epochs: f.get("comparator.epochs", cd.epochs)?,
                batch_size: f.get("comparator.batch_size", cd.batch_size)?,
                lr: f.get("comparator.lr", cd.lr)?,
                val_fraction: f.get("comparator.val_fraction", cd.val_fraction)?,
                swap_augment: f.get("comparator.swap_augment", cd.swap_augment)?,
                checkpoint: f.path("comparator.checkpoint")?,
            },
            invert: InvertConfig {
                steps: f.get("invert.steps", inv.steps)?,
                lr: f.get("invert.lr", inv.lr)?,
                mean_samples: f.get("invert.mean_samples", inv.mean_samples)?,
            },
            optimize: OptimizeConfig {
                method: f.get("optimize.method", Method::Both)?,
                lambda1: f.get("optimize.lambda1", pd.lambda1)?,
                lambda2: f.get("optimize.lambda2", pd.lambda2)?,
                lambda3: f.get("optimize.lambda3", pd.lambda3)?,
                squared_penalties: f.get("optimize.squared_penalties", pd.squared)?,
                mask: f.path("optimize.mask")?,
                steps: f.get("optimize.steps", od.steps)?,
                step_size: f.get("optimize.step_size", od.step_size)?,
                divergence_factor: f.get("optimize.divergence_factor", od.divergence.factor)?,
                divergence_patience: f.get("optimize.divergence_patience", od.divergence.patience)?,
            },
            mapper: MapperConfig {
                train_count: f.get("mapper.train_count", 40)?,
                sampled_latents: f.get("mapper.sampled_latents", 0)?,
                epochs: f.get("mapper.epochs", md.epochs)?,
                batch_size: f.get("mapper.batch_size", md.batch_size)?,
                lr: f.get("mapper.lr", md.lr)?,
            },
            fid: FidConfig { per_label: f.get("fid.per_label", 2)?, extractor_seed: f.get("fid.extractor_seed", 0)? },
        };
        if let Some((k, (_, origin))) = f.raw.iter().next() {
            bail!("{}: unknown config key `{k}`", origin.display());
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_raw(RawConfig::load(path)?)
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stage as u64)
    }

    pub fn gan_arch(&self) -> GanArch {
        GanArch {
            resolution: self.data.resolution,
            z_dim: self.gan.z_dim,
            w_dim: self.gan.w_dim,
            num_classes: self.gan.num_classes,
            mapping_layers: self.gan.mapping_layers,
            channels: self.gan.channels.clone(),
            mbstd_group: self.gan.mbstd_group,
            ..GanArch::desk()
        }
    }

    pub fn gan_train(&self) -> GanTrainConfig {
        let g = &self.gan;
        GanTrainConfig {
            steps: g.steps,
            batch_size: g.batch_size,
            lr_g: g.lr_g,
            lr_d: g.lr_d,
            r1_gamma: g.r1_gamma,
            r1_interval: g.r1_interval,
            apa_enabled: g.apa,
            apa_target: g.apa_target,
            apa_step: g.apa_step,
            apa_interval: g.apa_interval,
            apa_max: g.apa_max,
            seed: self.stage_seed(Stage::Gan),
            ..GanTrainConfig::default()
        }
    }

    pub fn comparator_arch(&self) -> ComparatorArch {
        ComparatorArch { widths: self.comparator.widths.clone() }
    }

    pub fn comparator_train(&self) -> CompTrainConfig {
        let c = &self.comparator;
        CompTrainConfig {
            epochs: c.epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            val_fraction: c.val_fraction,
            swap_augment: c.swap_augment,
            seed: self.stage_seed(Stage::Comparator),
        }
    }

    pub fn inversion(&self, class_id: Option<usize>) -> InversionConfig {
        InversionConfig {
            steps: self.invert.steps,
            lr: self.invert.lr,
            mean_samples: self.invert.mean_samples,
            class_id,
            seed: self.stage_seed(Stage::Invert),
            divergence: Divergence::default(),
        }
    }

    pub fn penalties(&self) -> Penalties {
        let o = &self.optimize;
        Penalties { lambda1: o.lambda1, lambda2: o.lambda2, lambda3: o.lambda3, squared: o.squared_penalties }
    }

    pub fn latent_opt(&self) -> OptConfig {
        let o = &self.optimize;
        OptConfig {
            penalties: self.penalties(),
            steps: o.steps,
            step_size: o.step_size,
            seed: self.stage_seed(Stage::Optimize),
            divergence: Divergence { factor: o.divergence_factor, patience: o.divergence_patience },
        }
    }

    pub fn mapper_train(&self) -> MapperTrainConfig {
        let m = &self.mapper;
        MapperTrainConfig {
            penalties: self.penalties(),
            epochs: m.epochs,
            batch_size: m.batch_size,
            lr: m.lr,
            seed: self.stage_seed(Stage::Mapper),
        }
    }

    /// Checks referenced paths and downstream preconditions without running anything.
    pub fn validate(&self) -> Result<()> {
        let paths = [
            ("data.screws_manifest", &self.data.screws_manifest),
            ("data.pairs_manifest", &self.data.pairs_manifest),
            ("gan.checkpoint", &self.gan.checkpoint),
            ("comparator.checkpoint", &self.comparator.checkpoint),
            ("optimize.mask", &self.optimize.mask),
        ];
        for (key, p) in paths {
            if let Some(p) = p {
                ensure!(p.exists(), "{key}: path {} does not exist", p.display());
            }
        }
        self.gan_arch().validate()?;
        self.gan_train().validate()?;
        self.penalties().validate()?;
        ensure!(self.data.screws >= 1 || self.data.screws_manifest.is_some(), "data.screws must be positive");
        ensure!(self.data.pairs >= 1 || self.data.pairs_manifest.is_some(), "data.pairs must be positive");
        ensure!(self.data.eval_screws >= 1, "data.eval_screws must be positive");
        ensure!(!self.comparator.widths.is_empty() && !self.comparator.widths.contains(&0), "comparator.widths must be positive");
        ensure!(
            self.data.resolution >> self.comparator.widths.len() >= 1,
            "comparator has more stride-2 blocks than resolution {} allows",
            self.data.resolution
        );
        ensure!(self.comparator.epochs >= 1 && self.comparator.batch_size >= 1, "comparator epochs and batch size must be positive");
        ensure!((0.0..1.0).contains(&self.comparator.val_fraction), "comparator.val_fraction must be in [0, 1)");
        ensure!(self.invert.mean_samples >= 1 && self.invert.lr > 0.0, "invert.mean_samples and invert.lr must be positive");
        ensure!(self.optimize.step_size > 0.0, "optimize.step_size must be positive");
        ensure!(
            self.optimize.divergence_factor > 0.0 && self.optimize.divergence_patience >= 1,
            "divergence factor and patience must be positive"
        );
        if self.optimize.method.mapper() {
            ensure!(self.mapper.train_count >= 1 && self.mapper.batch_size >= 1, "mapper.train_count and batch size must be positive");
            ensure!(
                self.data.screws_manifest.is_some() || self.mapper.train_count <= self.data.screws,
                "mapper.train_count {} exceeds data.screws {}",
                self.mapper.train_count,
                self.data.screws
            );
        }
        ensure!(self.fid.per_label >= 1, "fid.per_label must be positive");
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<PipelineConfig> {
        PipelineConfig::from_raw(RawConfig::parse_str(text, Path::new("test.conf"))?)
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(format!("{:#}", parse("data.resolution = 16").unwrap_err()).contains("seed"));
        assert_eq!(parse("seed = 7").unwrap().seed, 7);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(parse("seed = 1\ngan.stpes = 3").is_err());
        assert!(parse("seed = 1\ngan.steps = many").is_err());
        assert!(parse("seed = 1\noptimize.method = sideways").is_err());
        assert!(parse("seed = 1\nnot a pair").is_err());
    }

    #[test]
    fn includes_resolve_relative_and_later_keys_win() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("sub/base.conf"), "seed = 1\ngan.steps = 10\ndata.screws_manifest = s.txt\n").unwrap();
        fs::write(dir.path().join("run.conf"), "include sub/base.conf\ngan.steps = 20\n").unwrap();
        let c = PipelineConfig::load(&dir.path().join("run.conf")).unwrap();
        assert_eq!((c.seed, c.gan.steps), (1, 20));
        assert_eq!(c.data.screws_manifest.unwrap(), dir.path().join("sub/s.txt"));
    }

    #[test]
    fn include_cycle_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.conf"), "include a.conf\n").unwrap();
        assert!(RawConfig::load(&dir.path().join("a.conf")).is_err());
    }

    #[test]
    fn missing_paths_fail_validation() {
        let c = parse("seed = 1\ndata.pairs_manifest = /nonexistent/pairs.txt").unwrap();
        assert!(format!("{:#}", c.validate().unwrap_err()).contains("data.pairs_manifest"));
        assert!(parse("seed = 1").unwrap().validate().is_ok());
        assert!(parse("seed = 1\ngan.channels = 8,8").unwrap().validate().is_err());
        assert!(parse("seed = 1\noptimize.lambda1 = -1").unwrap().validate().is_err());
    }

    #[test]
    fn reference_defaults_match_built_in_defaults() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/defaults.conf");
        let mut raw = RawConfig::load(&path).unwrap();
        raw.set("seed", 0);
        let from_file = PipelineConfig::from_raw(raw).unwrap();
        assert_eq!(from_file, parse("seed = 0").unwrap());
    }
}
