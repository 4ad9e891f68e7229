use std::path::Path;

use inout_core::eval::{self, ReportFormat};
use inout_core::experiment::{self, ExperimentConfig, Pipeline};
use inout_core::image::Image;
use inout_core::manifest::{self, ImageSample, Label, Source, Split};
use inout_core::mixer::Policy;
use inout_core::Error;

fn tiny(out: &Path, n_aug: &str, seeds: &str, policies: &str) -> ExperimentConfig {
    let text = format!(
        r#"
name = "tiny"
seeds = {seeds}

[dataset]
kind = "synthetic"
[dataset.spec]
train_negatives = 24
train_positives = 6
test_negatives = 10
test_positives = 6

[augmentation]
scenario = "n_shot"
n = 2
n_aug = {n_aug}
policies = {policies}
prompts = ["skt background"]

[diffusion.pretrain]
epochs = 1

[diffusion.finetune]
epochs = 2
learning_rate = 0.01
num_regularization_images = 3

[diffusion.sampler]
steps = 4

[classifier]
epochs = 2
backbone = "logistic"
learning_rate = 0.05
"#
    );
    let mut cfg = ExperimentConfig::from_toml(&text).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn grid_produces_one_row_per_n_aug_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(&dir.path().join("a"), "[80, 100, 120]", "[0, 1, 2, 3]", r#"["inout"]"#);
    let out = experiment::run_experiment(&cfg).unwrap();
    assert_eq!(out.provenance.cells.len(), 12);
    assert_eq!(out.report.rows.len(), 3);
    assert!(out.report.rows.iter().all(|r| r.num_seeds == 4));
    assert_eq!(out.provenance.adapters.len(), 4);
    let text = std::fs::read_to_string(cfg.output_dir.join("report.txt")).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("| In&Out")).count(), 3);
    assert_eq!(text.lines().filter(|l| l.starts_with("| Average")).count(), 1);
    for f in ["report.csv", "report.json", "config.toml", "cells/inout-80/seed-0/record.json", "cells/inout-120/seed-3/scores.jsonl"] {
        assert!(cfg.output_dir.join(f).is_file(), "{f} missing");
    }
    let parsed = eval::parse_report(&std::fs::read_to_string(cfg.output_dir.join("report.csv")).unwrap(), ReportFormat::Dsv(',')).unwrap();
    assert_eq!(parsed.rounded(), out.report.rounded());
    let snapshot = ExperimentConfig::load(&cfg.output_dir.join("config.toml")).unwrap();
    assert_eq!(snapshot.digest(), cfg.digest());

    // same config again: served from the cache, same document
    let again = experiment::run_experiment(&cfg).unwrap();
    assert_eq!(std::fs::read_to_string(cfg.output_dir.join("report.txt")).unwrap(), text);
    assert_eq!(again.provenance.cells, out.provenance.cells);

    // from scratch elsewhere with more workers: recomputed, same numbers
    let fresh = ExperimentConfig { output_dir: dir.path().join("b"), workers: 2, ..cfg.clone() };
    let other = experiment::run_experiment(&fresh).unwrap();
    assert_eq!(eval::emit_report(&other.report, ReportFormat::TextTable), text);
    let digests = |o: &experiment::ExperimentOutcome| o.provenance.cells.iter().map(|c| c.classifier_digest.clone()).collect::<Vec<_>>();
    assert_eq!(digests(&other), digests(&out));
}

#[test]
fn single_seed_baseline_has_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "[0]", "[7]", r#"["inout"]"#);
    let out = experiment::run_experiment(&cfg).unwrap();
    assert_eq!(out.provenance.cells.len(), 1);
    assert!(out.provenance.adapters.is_empty(), "a baseline needs no adapter");
    let row = &out.report.rows[0];
    assert_eq!((row.std.ap, row.std.precision, row.std.recall), (0.0, 0.0, 0.0));
    assert_eq!(row.method, "In&Out");
    assert_eq!(row.n_aug, 0);
}

#[test]
fn failing_cells_keep_completed_rows() {
    let dir = tempfile::tempdir().unwrap();
    // a two-image review export cannot supply 4 diffusion samples
    let pool_dir = dir.path().join("pool");
    std::fs::create_dir_all(&pool_dir).unwrap();
    let mut records = Vec::new();
    for i in 0..2 {
        let name = format!("v{i}.png");
        let img = Image::filled(32, 96, 0.3);
        img.save_png(&pool_dir.join(&name)).unwrap();
        records.push(ImageSample::new(format!("v{i}"), img, Label::Positive, Source::Diffusion, Split::Train).record(Some(name)));
    }
    manifest::write_fragment(&pool_dir.join("accepted.jsonl"), &records).unwrap();

    let mut cfg = tiny(&dir.path().join("run"), "[4]", "[0, 1]", r#"["region_only", "diffusion_only"]"#);
    cfg.diffusion.source = experiment::DiffusionSourceKind::Pool;
    cfg.diffusion.pool_fragment = Some(pool_dir.join("accepted.jsonl"));
    let err = experiment::run_experiment(&cfg).unwrap_err();
    match &err {
        Error::Stage { stage, seed, .. } => {
            assert_eq!(stage, "augment");
            assert!(seed.is_some());
        }
        e => panic!("unexpected error {e}"),
    }
    assert!(err.to_string().contains("for seed"), "{err}");
    let partial = std::fs::read_to_string(cfg.output_dir.join("report.partial.txt")).unwrap();
    assert!(partial.contains("| Region 4"), "{partial}");
    assert!(!partial.contains("Diffusion 4"));
    assert!(!cfg.output_dir.join("report.txt").exists());
}

#[test]
fn pipeline_exposes_its_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), "[4]", "[0]", r#"["inout"]"#);
    let p = Pipeline::new(cfg).unwrap();
    let ds = p.dataset().unwrap();
    assert_eq!(ds.counts().train.negative, 24);
    let kept = p.instance_samples(0).unwrap();
    assert_eq!(kept.len(), 2);
    let (built, adapter) = p.build(Policy::Inout, 4, 0).unwrap();
    assert!(adapter.is_some());
    let ids: Vec<String> = built.metadata()["n_shot_ids"].as_array().unwrap().iter().map(|v| v.as_str().unwrap().to_string()).collect();
    assert_eq!(ids, kept.iter().map(|s| s.id.clone()).collect::<Vec<_>>());
    assert_eq!(built.counts().train.positive, 6);
    let rec = p.run_cell(Policy::Inout, 4, 0).unwrap();
    assert_eq!(rec.n_shot_ids, ids);
    assert!(dir.path().join(&rec.cell_dir).join("dataset/manifest.jsonl").is_file());
}

#[test]
fn config_validation_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), "[3]", "[0]", r#"["inout"]"#);
    assert!(matches!(experiment::run_experiment(&cfg), Err(Error::Validation(_))));
    cfg.augmentation.n_aug = vec![2];
    cfg.diffusion.backend = "stable-diffusion-v1.5".into();
    assert!(matches!(experiment::run_experiment(&cfg), Err(Error::Config(_))));

    let path = dir.path().join("exp.toml");
    let mut on_disk = tiny(Path::new("out"), "[2]", "[0]", r#"["inout"]"#);
    on_disk.dataset = experiment::DatasetSource::Manifest { path: "data/manifest.jsonl".into() };
    std::fs::write(&path, on_disk.to_toml()).unwrap();
    let loaded = ExperimentConfig::load(&path).unwrap();
    assert_eq!(loaded.output_dir, dir.path().join("out"));
    assert_eq!(loaded.cache_dir(), dir.path().join("out").join("cache"));

    // the only test in this binary that touches the environment
    let mut env_cfg = loaded.clone();
    std::env::set_var(experiment::ENV_OUTPUT_DIR, "/tmp/elsewhere");
    std::env::set_var(experiment::ENV_DATA_ROOT, "/data/m.jsonl");
    env_cfg.apply_env_overrides();
    std::env::remove_var(experiment::ENV_OUTPUT_DIR);
    std::env::remove_var(experiment::ENV_DATA_ROOT);
    assert_eq!(env_cfg.output_dir, Path::new("/tmp/elsewhere"));
    assert_eq!(env_cfg.dataset, experiment::DatasetSource::Manifest { path: "/data/m.jsonl".into() });
}
