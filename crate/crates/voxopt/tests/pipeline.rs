use std::fs;
use std::path::Path;

use voxopt::checkpoint::file_sha256;
use voxopt::config::{PipelineConfig, RawConfig};
use voxopt::pipeline::{run_pipeline, without_timing, STAGES};

const TINY: &str = "\
seed = 11
data.resolution = 8
data.screws = 12
data.pairs = 16
data.eval_screws = 3
gan.z_dim = 8
gan.w_dim = 8
gan.channels = 8,4
gan.mbstd_group = 2
gan.steps = 4
gan.batch_size = 2
comparator.widths = 4,8
comparator.epochs = 2
comparator.batch_size = 4
invert.steps = 10
invert.mean_samples = 16
optimize.steps = 5
mapper.train_count = 3
mapper.sampled_latents = 2
mapper.epochs = 2
mapper.batch_size = 2
";

fn tiny(dir: &Path, extra: &str) -> PipelineConfig {
    let path = dir.join("run.conf");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    let mut raw = RawConfig::load(&path).unwrap();
    raw.set("out_dir", dir.join("out").display());
    PipelineConfig::from_raw(raw).unwrap()
}

#[test]
fn tiny_pipeline_is_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "");
    let first = run_pipeline(&cfg).unwrap();
    let s = &first.summary;
    for stage in STAGES {
        assert!(s["stages"][stage].is_object(), "missing stage {stage}");
    }
    for key in ["gan", "comparator", "mapper"] {
        let c = &s["checkpoints"][key];
        let path = cfg.out_dir.join(c["path"].as_str().unwrap());
        assert_eq!(file_sha256(&path).unwrap(), c["sha256"].as_str().unwrap());
    }
    assert_eq!(s["stages"]["eval_fid"]["fake_count"], 24);
    assert_eq!(s["stages"]["optimize_latent"]["runs"], 3);
    assert_eq!(s["stages"]["train_mapper"]["latents"], 5);
    let trace = fs::read_to_string(cfg.out_dir.join("traces/optimize_latent_00.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 6);
    assert_eq!(fs::read(&first.summary_path).unwrap(), serde_json::to_vec_pretty(s).unwrap());

    let ckpt = fs::read(cfg.out_dir.join("checkpoints/gan.ckpt")).unwrap();
    fs::remove_dir_all(&cfg.out_dir).unwrap();
    let second = run_pipeline(&cfg).unwrap();
    assert_eq!(without_timing(&first.summary), without_timing(&second.summary));
    assert_eq!(ckpt, fs::read(cfg.out_dir.join("checkpoints/gan.ckpt")).unwrap());
}

#[test]
fn missing_dataset_path_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "data.pairs_manifest = nowhere/pairs.txt\n");
    let err = format!("{:#}", run_pipeline(&cfg).unwrap_err());
    assert!(err.contains("data.pairs_manifest"), "{err}");
    assert!(!cfg.out_dir.exists());
}

#[test]
fn failing_stage_is_named_and_partial_artifacts_remain() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("broken.ckpt"), b"not a checkpoint").unwrap();
    let cfg = tiny(dir.path(), "gan.checkpoint = broken.ckpt\n");
    let err = format!("{:#}", run_pipeline(&cfg).unwrap_err());
    assert!(err.contains("stage train_gan failed"), "{err}");
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(cfg.out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["failed_stage"], "train_gan");
    assert!(summary["stages"]["gen_data"].is_object());
    assert!(cfg.out_dir.join("screws.txt").exists());
}

#[test]
fn latent_only_method_skips_mapper_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "optimize.method = latent\ngan.steps = 1\ncomparator.epochs = 1\n");
    let s = run_pipeline(&cfg).unwrap().summary;
    assert!(s["stages"]["optimize_latent"].is_object());
    assert!(s["stages"].get("train_mapper").is_none());
    assert!(s["checkpoints"].get("mapper").is_none());
}
