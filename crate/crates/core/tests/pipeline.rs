use std::fs;

use irn_core::config::PairMask;
use irn_core::synthdata::{default_catalog, Dataset, NoiseSpec, RenderSpec};
use irn_core::train::{evaluate, load_checkpoint, run_dir, run_experiment, CHECKPOINT_FILE, METRICS_FILE};
use irn_core::{EvalOptions, ExperimentConfig};

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.data.frames_in = 4;
    c.data.frames = 2;
    c.data.size = 16;
    c.data.grid = 8;
    c.backbone.channels = 4;
    c.backbone.action_dim = 8;
    c.backbone.slow_stem = 3;
    c.backbone.slow_width = 3;
    c.backbone.fast_stem = 2;
    c.backbone.fast_width = 2;
    c.backbone.lateral = 2;
    c.backbone.patch_size = 2;
    c.spe.channels = [2, 2, 2];
    c.interaction.heads = 2;
    c.interaction.layers = 1;
    c.optim.epochs = 2;
    c.optim.decay_epochs = vec![1];
    c.optim.batch_size = 4;
    c
}

#[test]
fn dataset_generation_is_reproducible_and_reused() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let render = RenderSpec { frames: 4, size: 16 };
    let da = Dataset::ensure(a.path(), &default_catalog(), 12, 6, 3, render).unwrap();
    let db = Dataset::ensure(b.path(), &default_catalog(), 12, 6, 3, render).unwrap();
    assert_eq!(da.manifest.hash(), db.manifest.hash());
    assert_eq!(da.train[5].frames, db.train[5].frames);

    // A second call loads what is on disk.
    let again = Dataset::ensure(a.path(), &default_catalog(), 12, 6, 3, render).unwrap();
    assert_eq!(again.manifest, da.manifest);
    assert_eq!((again.train.len(), again.val.len()), (12, 6));
}

#[test]
fn finished_runs_are_reused_and_evaluable() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::ensure(&dir.path().join("data"), &default_catalog(), 12, 6, 0, RenderSpec { frames: 4, size: 16 })
        .unwrap();
    let cfg = tiny();
    let run = run_dir(dir.path(), &cfg);
    let first = run_experiment(&cfg, &ds, &run).unwrap();
    assert_eq!(first.history.len(), 4);
    let metrics = fs::read(run.join(METRICS_FILE)).unwrap();

    let second = run_experiment(&cfg, &ds, &run).unwrap();
    assert_eq!(fs::read(run.join(METRICS_FILE)).unwrap(), metrics);
    assert_eq!(second.final_val, first.final_val);

    let model = load_checkpoint(&run.join(CHECKPOINT_FILE)).unwrap();
    let clean = evaluate(&model, &ds.val, &EvalOptions::default()).unwrap();
    assert!((clean.top1() - first.final_val.top1).abs() < 1e-12);

    let noisy = EvalOptions {
        noise: Some(NoiseSpec::new(0.5, 0.5, 0.0).unwrap()),
        noise_seed: 4,
        pairs: None,
    };
    let r1 = evaluate(&model, &ds.val, &noisy).unwrap();
    let r2 = evaluate(&model, &ds.val, &noisy).unwrap();
    assert_eq!(r1.ranks, r2.ranks);

    let masked = EvalOptions {
        pairs: Some(PairMask::NONE),
        ..EvalOptions::default()
    };
    assert_eq!(evaluate(&model, &ds.val, &masked).unwrap().labels.len(), 6);
}

#[test]
fn mismatched_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::ensure(dir.path(), &default_catalog(), 6, 6, 0, RenderSpec { frames: 8, size: 16 }).unwrap();
    let cfg = tiny();
    assert!(run_experiment(&cfg, &ds, &dir.path().join("run")).is_err());
}
