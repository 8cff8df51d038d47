use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use voxopt_core::mesh::{parse_stl, voxelize};
use voxopt_core::shapegen::grabability_score;

use voxopt::config::{PipelineConfig, RawConfig};
use voxopt::latent::LatentFile;
use voxopt::pipeline::{self, breakdown_json, fid_json};
use voxopt::{render, voxb};

#[derive(Parser)]
#[command(name = "voxopt", version, about = "Latent-space optimization of voxel components")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Seeded {
    /// Config file; see configs/defaults.conf for every key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Seeded {
    fn load(&self) -> Result<PipelineConfig> {
        let mut raw = match &self.config {
            Some(p) => RawConfig::load(p)?,
            None => RawConfig::default(),
        };
        if let Some(s) = self.seed {
            raw.set("seed", s);
        }
        PipelineConfig::from_raw(raw)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate training screws, comparator pairs and evaluation screws with manifests.
    GenData {
        #[command(flatten)]
        cfg: Seeded,
        #[arg(long)]
        out: PathBuf,
    },
    /// Voxelize a binary STL mesh into a VOXB file.
    Voxelize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator and discriminator.
    TrainGan {
        #[command(flatten)]
        cfg: Seeded,
        /// `path class_id` manifest; defaults to the config's data.screws_manifest.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train the pairwise comparator.
    TrainComparator {
        #[command(flatten)]
        cfg: Seeded,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Embed a VOXB component into the generator's latent space.
    Invert {
        #[command(flatten)]
        cfg: Seeded,
        #[arg(long)]
        gan: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Restrict the starting point to one class.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize one component's latent code against the comparator.
    OptimizeLatent {
        #[command(flatten)]
        cfg: Seeded,
        #[arg(long)]
        gan: PathBuf,
        #[arg(long)]
        comparator: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Starting latent; the input is inverted first when absent.
        #[arg(long)]
        latent: Option<PathBuf>,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Train a latent mapper on a `latent_path voxb_path` manifest.
    TrainMapper {
        #[command(flatten)]
        cfg: Seeded,
        #[arg(long)]
        gan: PathBuf,
        #[arg(long)]
        comparator: PathBuf,
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Apply a trained mapper to a latent code.
    ApplyMapper {
        #[command(flatten)]
        cfg: Seeded,
        #[arg(long)]
        gan: PathBuf,
        #[arg(long)]
        mapper: PathBuf,
        #[arg(long)]
        latent: PathBuf,
        /// Source component; with --comparator, scores the edit.
        #[arg(long = "in", requires = "comparator")]
        input: Option<PathBuf>,
        #[arg(long)]
        comparator: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Slice-wise FID of the generator against a `path class_id` manifest.
    EvalFid {
        #[command(flatten)]
        cfg: Seeded,
        #[arg(long)]
        gan: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        per_label: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write axial, coronal and sagittal middle slices of a VOXB file as PGM.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage from data generation to evaluation.
    Pipeline {
        #[command(flatten)]
        cfg: Seeded,
        /// Overrides the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print(v: &Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn trace_or(trace: &Option<PathBuf>, out: &Path) -> PathBuf {
    trace.clone().unwrap_or_else(|| out.with_extension("jsonl"))
}

fn write_trace_row(path: &Path, row: Value) -> Result<()> {
    pipeline::write_jsonl(path, [row])
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let c = cfg.load()?;
            c.validate()?;
            fs::create_dir_all(&out)?;
            pipeline::gen_data(&c, &out)
        }
        Command::Voxelize { input, resolution, out } => {
            let bytes = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let v = voxelize(&parse_stl(&bytes)?, resolution)?;
            voxb::write(&out, &v.grid)?;
            Ok(json!({
                "occupied": v.grid.occupied(),
                "non_watertight": v.non_watertight,
                "zero_volume": v.zero_volume,
                "grabability": grabability_score(&v.grid),
            }))
        }
        Command::TrainGan { cfg, data, out, trace } => {
            let c = cfg.load()?;
            c.validate()?;
            let data = match data.or_else(|| c.data.screws_manifest.clone()) {
                Some(d) => d,
                None => bail!("no training data: pass --data or set data.screws_manifest"),
            };
            let (mut s, hash) = pipeline::train_gan_stage(&c, &data, &out, &trace_or(&trace, &out))?;
            s["sha256"] = json!(hash);
            Ok(s)
        }
        Command::TrainComparator { cfg, pairs, out, trace } => {
            let c = cfg.load()?;
            c.validate()?;
            let (mut s, hash) = pipeline::train_comparator_stage(&c, &pairs, &out, &trace_or(&trace, &out))?;
            s["sha256"] = json!(hash);
            Ok(s)
        }
        Command::Invert { cfg, gan, input, class, out } => {
            let c = cfg.load()?;
            let (gen, hash) = pipeline::load_generator(&gan)?;
            let grid = voxb::read(&input)?;
            let inv = pipeline::invert_grid(&c, &gen, &hash, &grid, class)?;
            inv.latent.save(&out)?;
            Ok(json!({ "iou": inv.iou, "best_loss": inv.best_loss, "generator_sha256": hash }))
        }
        Command::OptimizeLatent { cfg, gan, comparator, input, latent, mask, out, trace } => {
            let c = cfg.load()?;
            c.penalties().validate()?;
            let (gen, hash) = pipeline::load_generator(&gan)?;
            let (comp, _) = pipeline::load_comparator(&comparator)?;
            let source = voxb::read(&input)?;
            let start = match latent {
                Some(p) => {
                    let lf = LatentFile::load(&p)?;
                    lf.check_generator(&hash)?;
                    lf
                }
                None => pipeline::invert_grid(&c, &gen, &hash, &source, None)?.latent,
            };
            let mask = mask.as_deref().map(voxb::read).transpose()?;
            let o = pipeline::optimize_grid(&c, &gen, &comp, &source, &start, mask.as_ref(), &trace_or(&trace, &out))?;
            voxb::write(&out, &o.grid)?;
            Ok(json!({
                "best_step": o.best_step,
                "step0": breakdown_json(&o.step0),
                "best": breakdown_json(&o.best),
                "grabability_source": grabability_score(&source),
                "grabability_optimized": grabability_score(&o.grid),
            }))
        }
        Command::TrainMapper { cfg, gan, comparator, latents, out, trace } => {
            let c = cfg.load()?;
            c.penalties().validate()?;
            let (gen, gen_hash) = pipeline::load_generator(&gan)?;
            let (comp, _) = pipeline::load_comparator(&comparator)?;
            let (mut s, hash) =
                pipeline::train_mapper_stage(&c, &gen, &gen_hash, &comp, &latents, &out, &trace_or(&trace, &out))?;
            s["sha256"] = json!(hash);
            Ok(s)
        }
        Command::ApplyMapper { cfg, gan, mapper, latent, input, comparator, out, trace } => {
            let c = cfg.load()?;
            let (gen, hash) = pipeline::load_generator(&gan)?;
            let (m, _) = pipeline::load_mapper(&mapper)?;
            let lf = LatentFile::load(&latent)?;
            lf.check_generator(&hash)?;
            let source = input.as_deref().map(voxb::read).transpose()?;
            let comp = comparator.as_deref().map(pipeline::load_comparator).transpose()?;
            let scored = source.as_ref().zip(comp.as_ref().map(|(c, _)| c));
            let mapped = pipeline::map_grid(&c, &gen, &m, &lf, scored)?;
            voxb::write(&out, &mapped.grid)?;
            let mut row = mapped.loss.as_ref().map(breakdown_json).unwrap_or_else(|| json!({}));
            row["compare"] = json!(mapped.compare);
            row["grabability_mapped"] = json!(grabability_score(&mapped.grid));
            write_trace_row(&trace_or(&trace, &out), row.clone())?;
            Ok(row)
        }
        Command::EvalFid { cfg, gan, data, per_label, out } => {
            let c = cfg.load()?;
            let (gen, _) = pipeline::load_generator(&gan)?;
            let report = pipeline::eval_fid_stage(&c, &gen, &data, per_label)?;
            let v = fid_json(&report);
            fs::write(&out, serde_json::to_vec_pretty(&v)?).with_context(|| format!("writing {}", out.display()))?;
            Ok(v)
        }
        Command::Render { input, out } => {
            let paths = render::render_slices(&input, &out)?;
            Ok(json!(paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>()))
        }
        Command::Pipeline { cfg, out } => {
            let mut c = cfg.load()?;
            if let Some(o) = out {
                c.out_dir = o;
            }
            let r = pipeline::run_pipeline(&c)?;
            Ok(json!({ "summary": r.summary_path.display().to_string(), "oracle": r.summary["oracle"] }))
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()).and_then(|v| print(&v)) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
