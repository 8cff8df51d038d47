//! Pipeline stages. Each stage reads only files written by earlier stages or
//! declared in the config, so every subcommand can also run on its own.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};
use voxopt_core::comparator::{pair_accuracy, train_comparator, Comparator};
use voxopt_core::fid::{slice_fid, FidReport, RandomConvExtractor};
use voxopt_core::gan::{sample_z, train_gan, Generator};
use voxopt_core::inversion::invert;
use voxopt_core::optimize::{apply_mapper, mapper_loss, run_latent_optimization, train_mapper, LossBreakdown, Mapper};
use voxopt_core::shapegen::{grabability_score, make_pair_dataset, make_screw_dataset};
use voxopt_core::voxel::{binarize, to_signed, SignedGrid, VoxelGrid};

use crate::checkpoint::{self, Container};
use crate::config::{PipelineConfig, Stage};
use crate::latent::LatentFile;
use crate::{manifest, voxb};

pub const SCREWS_MANIFEST: &str = "screws.txt";
pub const PAIRS_MANIFEST: &str = "pairs.txt";
pub const EVAL_MANIFEST: &str = "eval.txt";

/// Summary keys written by a complete run, in execution order.
pub const STAGES: [&str; 8] =
    ["gen_data", "train_gan", "train_comparator", "invert", "optimize_latent", "train_mapper", "apply_mapper", "eval_fid"];

pub fn write_jsonl<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for row in rows {
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn breakdown_json(b: &LossBreakdown) -> Value {
    json!({ "total": b.total, "comparator": b.comparator, "latent": b.latent, "data": b.data, "protect": b.protect })
}

pub fn fid_json(r: &FidReport) -> Value {
    json!({
        "axial": r.axial,
        "coronal": r.coronal,
        "sagittal": r.sagittal,
        "extractor_id": r.extractor_id,
        "real_count": r.real_count,
        "fake_count": r.fake_count,
    })
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn fraction(flags: impl IntoIterator<Item = bool>) -> f64 {
    let (mut hits, mut n) = (0usize, 0usize);
    for f in flags {
        hits += f as usize;
        n += 1;
    }
    hits as f64 / n.max(1) as f64
}

fn rel(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Generates training screws, comparator pairs and held-out evaluation
/// screws under `out`, each with its manifest. Manifests named in the config
/// replace the corresponding generated set.
pub fn gen_data(cfg: &PipelineConfig, out: &Path) -> Result<Value> {
    let r = cfg.data.resolution;
    let mut summary = Map::new();
    summary.insert("resolution".into(), json!(r));
    if cfg.data.screws_manifest.is_none() {
        create_dir(&out.join("screws"))?;
        let screws = make_screw_dataset(cfg.data.screws, cfg.stage_seed(Stage::Screws), r)?;
        let mut records = Vec::with_capacity(screws.len());
        for (i, s) in screws.iter().enumerate() {
            let name = format!("screws/{i:04}.voxb");
            voxb::write(&out.join(&name), &s.grid)?;
            records.push((name, s.spec.class_id));
        }
        manifest::write_shapes(&out.join(SCREWS_MANIFEST), &records)?;
        summary.insert("screws".into(), json!(screws.len()));
        summary.insert(
            "screws_mean_grabability".into(),
            json!(mean(&screws.iter().map(|s| grabability_score(&s.grid)).collect::<Vec<_>>())),
        );
    }
    if cfg.data.pairs_manifest.is_none() {
        create_dir(&out.join("pairs"))?;
        let pairs = make_pair_dataset(cfg.data.pairs, cfg.stage_seed(Stage::Pairs), r)?;
        let mut records = Vec::with_capacity(pairs.len());
        for (i, p) in pairs.iter().enumerate() {
            let (a, b) = (format!("pairs/{i:04}_a.voxb"), format!("pairs/{i:04}_b.voxb"));
            voxb::write(&out.join(&a), &p.first)?;
            voxb::write(&out.join(&b), &p.second)?;
            records.push((a, b, p.label));
        }
        manifest::write_pairs(&out.join(PAIRS_MANIFEST), &records)?;
        summary.insert("pairs".into(), json!(pairs.len()));
        summary.insert("pairs_label_one_fraction".into(), json!(fraction(pairs.iter().map(|p| p.label == 1))));
    }
    create_dir(&out.join("eval"))?;
    let eval = make_screw_dataset(cfg.data.eval_screws, cfg.stage_seed(Stage::EvalScrews), r)?;
    let mut records = Vec::with_capacity(eval.len());
    for (i, s) in eval.iter().enumerate() {
        let name = format!("eval/{i:02}.voxb");
        voxb::write(&out.join(&name), &s.grid)?;
        records.push((name, s.spec.class_id));
    }
    manifest::write_shapes(&out.join(EVAL_MANIFEST), &records)?;
    summary.insert("eval_screws".into(), json!(eval.len()));
    Ok(Value::Object(summary))
}

/// Trains the GAN on a `path class_id` manifest and writes its checkpoint
/// and per-step trace. Returns the stage summary and the checkpoint hash.
pub fn train_gan_stage(cfg: &PipelineConfig, data: &Path, out: &Path, trace: &Path) -> Result<(Value, String)> {
    let dataset = manifest::load_shapes(data)?;
    let train_cfg = cfg.gan_train();
    let trained = train_gan::<f32>(&cfg.gan_arch(), &train_cfg, &dataset)?;
    let hash = checkpoint::gan_container(&trained.generator, &trained.discriminator, train_cfg.steps as u64, train_cfg.seed)?
        .save(out)?;
    write_jsonl(
        trace,
        trained.log.records.iter().map(|r| json!({"step": r.step, "d_loss": r.d_loss, "g_loss": r.g_loss, "r1": r.r1, "r_t": r.r_t, "p": r.p})),
    )?;
    let tail = &trained.log.records[trained.log.records.len().saturating_sub(50)..];
    let summary = json!({
        "steps": train_cfg.steps,
        "training_shapes": dataset.len(),
        "generator_parameters": trained.generator.count_parameters(),
        "discriminator_parameters": trained.discriminator.count_parameters(),
        "final_d_loss_mean50": mean(&tail.iter().map(|r| r.d_loss).collect::<Vec<_>>()),
        "final_g_loss_mean50": mean(&tail.iter().map(|r| r.g_loss).collect::<Vec<_>>()),
        "final_apa_p": trained.log.adaptations.last().map_or(0.0, |a| a.1),
    });
    Ok((summary, hash))
}

/// Trains the comparator on a pair manifest. Returns the stage summary and
/// the checkpoint hash.
pub fn train_comparator_stage(cfg: &PipelineConfig, pairs: &Path, out: &Path, trace: &Path) -> Result<(Value, String)> {
    let pairs = manifest::load_pairs(pairs)?;
    let train_cfg = cfg.comparator_train();
    let (comp, log) = train_comparator::<f32>(&cfg.comparator_arch(), &train_cfg, &pairs)?;
    let resolution = pairs[0].first.resolution();
    let hash = checkpoint::comparator_container(&comp, resolution, train_cfg.epochs as u64, train_cfg.seed)?.save(out)?;
    write_jsonl(
        trace,
        log.records.iter().map(|r| {
            json!({"epoch": r.epoch, "train_loss": r.train_loss, "train_accuracy": r.train_accuracy, "val_accuracy": r.val_accuracy})
        }),
    )?;
    let last = log.records.last().ok_or_else(|| anyhow!("comparator trained for zero epochs"))?;
    let summary = json!({
        "pairs": pairs.len(),
        "train_pairs": log.train_indices.len(),
        "val_pairs": log.val_indices.len(),
        "epochs": train_cfg.epochs,
        "final_train_loss": last.train_loss,
        "train_accuracy": pair_accuracy(&comp, &pairs, &log.train_indices)?,
        "val_accuracy": last.val_accuracy,
    });
    Ok((summary, hash))
}

pub fn load_generator(path: &Path) -> Result<(Generator<f32>, String)> {
    let (c, hash) = Container::load(path)?;
    Ok((checkpoint::gan_from(&c)?.0, hash))
}

pub fn load_comparator(path: &Path) -> Result<(Comparator<f32>, String)> {
    let (c, hash) = Container::load(path)?;
    Ok((checkpoint::comparator_from(&c)?.0, hash))
}

pub fn load_mapper(path: &Path) -> Result<(Mapper<f32>, String)> {
    let (c, hash) = Container::load(path)?;
    Ok((checkpoint::mapper_from(&c)?, hash))
}

/// Outcome of inverting one grid.
#[derive(Debug, Clone)]
pub struct Inverted {
    pub latent: LatentFile,
    pub iou: f64,
    pub best_loss: f64,
    pub reconstruction: VoxelGrid,
}

pub fn invert_grid(
    cfg: &PipelineConfig,
    gen: &Generator<f32>,
    gen_hash: &str,
    grid: &VoxelGrid,
    class_id: Option<usize>,
) -> Result<Inverted> {
    let res = invert(gen, grid, &cfg.inversion(class_id))?;
    let reconstruction = binarize(&gen.synthesize(&res.w)?, 0.0);
    Ok(Inverted {
        latent: LatentFile::new(&res.w, gen_hash),
        iou: reconstruction.iou(grid)?,
        best_loss: res.best_loss,
        reconstruction,
    })
}

/// Inverts every shape of a manifest (the first `limit` when given) into
/// `out_dir/<prefix>_NN.json` and writes a `latent_path voxb_path` manifest.
pub fn invert_manifest(
    cfg: &PipelineConfig,
    gen: &Generator<f32>,
    gen_hash: &str,
    shapes: &Path,
    limit: Option<usize>,
    out_dir: &Path,
    prefix: &str,
    latents_manifest: &Path,
) -> Result<Vec<Inverted>> {
    create_dir(out_dir)?;
    let mut records = Vec::new();
    let mut out = Vec::new();
    let entries = manifest::read_shapes(shapes)?;
    let n = limit.unwrap_or(entries.len()).min(entries.len());
    let base = latents_manifest.parent().unwrap_or(Path::new(""));
    for (i, (path, class)) in entries.iter().take(n).enumerate() {
        let grid = voxb::read(path)?;
        let inv = invert_grid(cfg, gen, gen_hash, &grid, Some(*class))?;
        let lp = out_dir.join(format!("{prefix}_{i:02}.json"));
        inv.latent.save(&lp)?;
        records.push((rel_or_abs(base, &lp), rel_or_abs(base, path)));
        log::info!("inverted {} (iou {:.3})", path.display(), inv.iou);
        out.push(inv);
    }
    manifest::write_latents(latents_manifest, &records)?;
    Ok(out)
}

fn rel_or_abs(base: &Path, path: &Path) -> String {
    match path.strip_prefix(base) {
        Ok(p) => p.display().to_string(),
        Err(_) => std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf()).display().to_string(),
    }
}

/// Loads `(w, v)` pairs from a latent manifest, checking generator hashes.
pub fn load_latents(path: &Path, gen_hash: &str) -> Result<Vec<(LatentFile, VoxelGrid)>> {
    manifest::read_latents(path)?
        .into_iter()
        .map(|(lp, vp)| {
            let lf = LatentFile::load(&lp)?;
            lf.check_generator(gen_hash).with_context(|| format!("latent {}", lp.display()))?;
            Ok((lf, voxb::read(&vp)?))
        })
        .collect()
}

/// Per-run outcome of latent optimization.
#[derive(Debug, Clone)]
pub struct Optimized {
    pub grid: VoxelGrid,
    pub best_step: usize,
    pub step0: LossBreakdown,
    pub best: LossBreakdown,
}

pub fn optimize_grid(
    cfg: &PipelineConfig,
    gen: &Generator<f32>,
    comp: &Comparator<f32>,
    source: &VoxelGrid,
    latent: &LatentFile,
    mask: Option<&VoxelGrid>,
    trace: &Path,
) -> Result<Optimized> {
    let w_s = latent.code()?;
    let res = run_latent_optimization(gen, comp, source, &w_s, &cfg.latent_opt(), mask)?;
    write_jsonl(
        trace,
        res.trace.iter().enumerate().map(|(step, b)| {
            let mut row = breakdown_json(b);
            row["step"] = json!(step);
            row
        }),
    )?;
    Ok(Optimized { grid: binarize(&res.grid, 0.0), best_step: res.best_step, step0: res.trace[0], best: res.trace[res.best_step] })
}

/// Trains a mapper on a latent manifest and writes its checkpoint and
/// per-epoch trace.
pub fn train_mapper_stage(
    cfg: &PipelineConfig,
    gen: &Generator<f32>,
    gen_hash: &str,
    comp: &Comparator<f32>,
    latents: &Path,
    out: &Path,
    trace: &Path,
) -> Result<(Value, String)> {
    let mut set: Vec<_> = load_latents(latents, gen_hash)?
        .into_iter()
        .map(|(lf, v)| Ok((lf.code()?, to_signed::<f32>(&v))))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(Stage::Mapper) ^ 0x5a3d);
    for _ in 0..cfg.mapper.sampled_latents {
        let class = rng.random_range(0..gen.arch.num_classes);
        let w = gen.map_latent(&sample_z(&mut rng, gen.arch.z_dim, class))?;
        let v = to_signed::<f32>(&binarize(&gen.synthesize(&w)?, 0.0));
        set.push((w, v));
    }
    let train_cfg = cfg.mapper_train();
    let (mapper, log) = train_mapper(gen, comp, &set, &train_cfg)?;
    let hash = checkpoint::mapper_container(&mapper, train_cfg.epochs as u64, train_cfg.seed)?.save(out)?;
    let rows = std::iter::once((0usize, &log.initial)).chain(log.epochs.iter().enumerate().map(|(e, b)| (e + 1, b)));
    write_jsonl(
        trace,
        rows.map(|(epoch, b)| {
            let mut row = breakdown_json(b);
            row["epoch"] = json!(epoch);
            row
        }),
    )?;
    let summary = json!({
        "latents": set.len(),
        "epochs": train_cfg.epochs,
        "initial": breakdown_json(&log.initial),
        "final": log.epochs.last().map(breakdown_json),
    });
    Ok((summary, hash))
}

/// Outcome of applying the mapper to one source.
#[derive(Debug, Clone)]
pub struct Mapped {
    pub grid: VoxelGrid,
    pub signed: SignedGrid<f32>,
    /// `compare(source, mapped)`; below 0.5 means the edit is preferred.
    pub compare: Option<f64>,
    pub loss: Option<LossBreakdown>,
}

pub fn map_grid(
    cfg: &PipelineConfig,
    gen: &Generator<f32>,
    mapper: &Mapper<f32>,
    latent: &LatentFile,
    source: Option<(&VoxelGrid, &Comparator<f32>)>,
) -> Result<Mapped> {
    let w = latent.code()?;
    let (_, signed) = apply_mapper(gen, mapper, &w)?;
    let (compare, loss) = match source {
        Some((v, comp)) => {
            let vs = to_signed::<f32>(v);
            let p = comp.compare(&vs, &signed)? as f64;
            let (loss, _) = mapper_loss(gen, comp, &vs, &w, mapper, &cfg.penalties())?;
            (Some(p), Some(loss))
        }
        None => (None, None),
    };
    Ok(Mapped { grid: binarize(&signed, 0.0), signed, compare, loss })
}

pub fn eval_fid_stage(cfg: &PipelineConfig, gen: &Generator<f32>, data: &Path, per_label: usize) -> Result<FidReport> {
    let shapes = manifest::load_shapes(data)?;
    let (real, labels): (Vec<VoxelGrid>, Vec<usize>) = shapes.into_iter().unzip();
    let extractor = RandomConvExtractor::new(cfg.fid.extractor_seed);
    Ok(slice_fid(&real, gen, &labels, per_label, &extractor, cfg.stage_seed(Stage::Fid))?)
}

/// Result of a pipeline run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: Value,
    pub summary_path: PathBuf,
}

struct Run {
    root: PathBuf,
    stages: Map<String, Value>,
    timing: Map<String, Value>,
    checkpoints: Map<String, Value>,
    oracle: Map<String, Value>,
    config: Value,
}

impl Run {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<(Value, T)>) -> Result<T> {
        log::info!("stage {name}");
        let t = Instant::now();
        let out = f(self);
        self.timing.insert(name.into(), json!(t.elapsed().as_secs_f64()));
        match out {
            Ok((summary, value)) => {
                self.stages.insert(name.into(), summary);
                Ok(value)
            }
            Err(e) => {
                let msg = format!("{e:#}");
                let _ = self.write_summary(Some((name, &msg)));
                Err(e.context(format!("stage {name} failed")))
            }
        }
    }

    fn checkpoint(&mut self, key: &str, path: &Path, hash: &str) {
        self.checkpoints.insert(key.into(), json!({ "path": rel(&self.root, path), "sha256": hash }));
    }

    fn summary(&self, failure: Option<(&str, &str)>) -> Value {
        let mut s = json!({
            "config": self.config,
            "stages": self.stages,
            "checkpoints": self.checkpoints,
            "oracle": self.oracle,
            "timing": self.timing,
        });
        if let Some((stage, msg)) = failure {
            s["failed_stage"] = json!(stage);
            s["error"] = json!(msg);
        }
        s
    }

    fn write_summary(&self, failure: Option<(&str, &str)>) -> Result<PathBuf> {
        let path = self.root.join("summary.json");
        fs::write(&path, serde_json::to_vec_pretty(&self.summary(failure))?).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// Runs every stage into `cfg.out_dir` and writes `summary.json` there.
/// Wall-clock data lives under the summary's `timing` key only.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutput> {
    cfg.validate().context("invalid config")?;
    let root = cfg.out_dir.clone();
    for d in ["checkpoints", "traces", "latents", "optimized", "mapped"] {
        create_dir(&root.join(d))?;
    }
    let mut run = Run {
        root: root.clone(),
        stages: Map::new(),
        timing: Map::new(),
        checkpoints: Map::new(),
        oracle: Map::new(),
        config: serde_json::to_value(cfg)?,
    };
    let total = Instant::now();

    run.stage("gen_data", |_| Ok((gen_data(cfg, &root)?, ())))?;
    let screws = cfg.data.screws_manifest.clone().unwrap_or_else(|| root.join(SCREWS_MANIFEST));
    let pairs = cfg.data.pairs_manifest.clone().unwrap_or_else(|| root.join(PAIRS_MANIFEST));
    let eval = root.join(EVAL_MANIFEST);

    let (gen, gen_hash) = run.stage("train_gan", |run| {
        let (s, p) = match &cfg.gan.checkpoint {
            Some(p) => (json!({ "pretrained": p.display().to_string() }), p.clone()),
            None => {
                let p = root.join("checkpoints/gan.ckpt");
                (train_gan_stage(cfg, &screws, &p, &root.join("traces/train_gan.jsonl"))?.0, p)
            }
        };
        let (gen, hash) = load_generator(&p)?;
        run.checkpoint("gan", &p, &hash);
        Ok((s, (gen, hash)))
    })?;

    let comp = run.stage("train_comparator", |run| {
        let (s, p) = match &cfg.comparator.checkpoint {
            Some(p) => (json!({ "pretrained": p.display().to_string() }), p.clone()),
            None => {
                let p = root.join("checkpoints/comparator.ckpt");
                (train_comparator_stage(cfg, &pairs, &p, &root.join("traces/train_comparator.jsonl"))?.0, p)
            }
        };
        let (comp, hash) = load_comparator(&p)?;
        run.checkpoint("comparator", &p, &hash);
        Ok((s, comp))
    })?;

    let originals: Vec<VoxelGrid> =
        manifest::read_shapes(&eval)?.iter().map(|(p, _)| voxb::read(p)).collect::<Result<_>>()?;
    let original_scores: Vec<f64> = originals.iter().map(grabability_score).collect();
    run.oracle.insert("median_original".into(), json!(median(&original_scores)));

    let eval_latents = root.join("latents/eval.txt");
    let train_latents = root.join("latents/train.txt");
    let eval_inv = run.stage("invert", |_| {
        let ev = invert_manifest(cfg, &gen, &gen_hash, &eval, None, &root.join("latents"), "eval", &eval_latents)?;
        let mut s = json!({
            "eval_count": ev.len(),
            "eval_mean_iou": mean(&ev.iter().map(|i| i.iou).collect::<Vec<_>>()),
            "eval_min_iou": ev.iter().map(|i| i.iou).fold(f64::INFINITY, f64::min),
            "eval_mean_best_loss": mean(&ev.iter().map(|i| i.best_loss).collect::<Vec<_>>()),
            "steps": cfg.invert.steps,
        });
        if cfg.optimize.method.mapper() {
            let tr = invert_manifest(
                cfg,
                &gen,
                &gen_hash,
                &screws,
                Some(cfg.mapper.train_count),
                &root.join("latents"),
                "train",
                &train_latents,
            )?;
            s["train_count"] = json!(tr.len());
            s["train_mean_iou"] = json!(mean(&tr.iter().map(|i| i.iou).collect::<Vec<_>>()));
        }
        Ok((s, ev))
    })?;
    let inverted_scores: Vec<f64> = eval_inv.iter().map(|i| grabability_score(&i.reconstruction)).collect();
    run.oracle.insert("median_inverted".into(), json!(median(&inverted_scores)));

    if cfg.optimize.method.latent() {
        let mask = cfg.optimize.mask.as_deref().map(voxb::read).transpose()?;
        let opt = run.stage("optimize_latent", |_| {
            let mut runs = Vec::new();
            for (i, (inv, v)) in eval_inv.iter().zip(&originals).enumerate() {
                let trace = root.join(format!("traces/optimize_latent_{i:02}.jsonl"));
                let o = optimize_grid(cfg, &gen, &comp, v, &inv.latent, mask.as_ref(), &trace)?;
                voxb::write(&root.join(format!("optimized/{i:02}.voxb")), &o.grid)?;
                runs.push(o);
            }
            let s = json!({
                "runs": runs.len(),
                "comparator_improved_fraction": fraction(runs.iter().map(|o| o.best.comparator < o.step0.comparator)),
                "mean_step0": breakdown_json(&mean_breakdown(runs.iter().map(|o| &o.step0))),
                "mean_best": breakdown_json(&mean_breakdown(runs.iter().map(|o| &o.best))),
                "median_best_step": median(&runs.iter().map(|o| o.best_step as f64).collect::<Vec<_>>()),
            });
            Ok((s, runs))
        })?;
        let scores: Vec<f64> = opt.iter().map(|o| grabability_score(&o.grid)).collect();
        run.oracle.insert("median_optimized".into(), json!(median(&scores)));
        run.oracle.insert(
            "optimized_above_original_fraction".into(),
            json!(fraction(scores.iter().zip(&original_scores).map(|(a, b)| a >= b))),
        );
        run.oracle.insert(
            "optimized_above_inverted_fraction".into(),
            json!(fraction(scores.iter().zip(&inverted_scores).map(|(a, b)| a >= b))),
        );
    }

    if cfg.optimize.method.mapper() {
        let mapper_path = root.join("checkpoints/mapper.ckpt");
        let mapper = run.stage("train_mapper", |run| {
            let trace = root.join("traces/train_mapper.jsonl");
            let (s, _) = train_mapper_stage(cfg, &gen, &gen_hash, &comp, &train_latents, &mapper_path, &trace)?;
            let (mapper, hash) = load_mapper(&mapper_path)?;
            run.checkpoint("mapper", &mapper_path, &hash);
            Ok((s, mapper))
        })?;
        let mapped = run.stage("apply_mapper", |_| {
            let mut out = Vec::new();
            let mut rows = Vec::new();
            for (i, (inv, v)) in eval_inv.iter().zip(&originals).enumerate() {
                let m = map_grid(cfg, &gen, &mapper, &inv.latent, Some((v, &comp)))?;
                voxb::write(&root.join(format!("mapped/{i:02}.voxb")), &m.grid)?;
                let mut row = breakdown_json(&m.loss.unwrap());
                row["case"] = json!(i);
                row["compare"] = json!(m.compare);
                rows.push(row);
                out.push(m);
            }
            write_jsonl(&root.join("traces/apply_mapper.jsonl"), rows)?;
            let cmp: Vec<f64> = out.iter().map(|m| m.compare.unwrap()).collect();
            let s = json!({
                "held_out": out.len(),
                "preferred_fraction": fraction(cmp.iter().map(|&p| p < 0.5)),
                "mean_compare": mean(&cmp),
            });
            Ok((s, out))
        })?;
        let scores: Vec<f64> = mapped.iter().map(|m| grabability_score(&m.grid)).collect();
        run.oracle.insert("median_mapped".into(), json!(median(&scores)));
        run.oracle.insert(
            "mapped_above_original_fraction".into(),
            json!(fraction(scores.iter().zip(&original_scores).map(|(a, b)| a >= b))),
        );
    }

    run.stage("eval_fid", |_| {
        let report = eval_fid_stage(cfg, &gen, &screws, cfg.fid.per_label)?;
        fs::write(root.join("fid_report.json"), serde_json::to_vec_pretty(&fid_json(&report))?)?;
        Ok((fid_json(&report), ()))
    })?;

    run.timing.insert("total".into(), json!(total.elapsed().as_secs_f64()));
    let summary_path = run.write_summary(None)?;
    Ok(RunOutput { summary: run.summary(None), summary_path })
}

fn mean_breakdown<'a>(items: impl Iterator<Item = &'a LossBreakdown>) -> LossBreakdown {
    let items: Vec<&LossBreakdown> = items.collect();
    let m = |f: fn(&LossBreakdown) -> f64| mean(&items.iter().map(|b| f(b)).collect::<Vec<_>>());
    LossBreakdown { total: m(|b| b.total), comparator: m(|b| b.comparator), latent: m(|b| b.latent), data: m(|b| b.data), protect: m(|b| b.protect) }
}

/// Removes the wall-clock fields from a summary.
pub fn without_timing(summary: &Value) -> Value {
    let mut s = summary.clone();
    if let Some(o) = s.as_object_mut() {
        o.remove("timing");
    }
    s
}
