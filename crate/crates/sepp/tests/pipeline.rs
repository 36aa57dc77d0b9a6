use std::path::Path;

use sepp::config::{Arm, DatasetKind, PipelineConfig};
use sepp::metrics;
use sepp::pipeline::{self, Context};
use sepp_core::data::SemanticPairSet;

/// The blobs fixture shrunk to a few seconds of work.
fn small() -> PipelineConfig {
    let mut cfg = PipelineConfig::blobs_fixture();
    cfg.dataset.classes = 5;
    cfg.dataset.per_class = 12;
    cfg.dataset.test_per_class = 6;
    cfg.miner.k = 0;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    cfg.eval.epochs = 3;
    cfg.run.seeds = vec![0];
    cfg.run.arms = vec![Arm::Vanilla, Arm::Sepp];
    cfg
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn run_writes_every_artifact() {
    let mut cfg = small();
    cfg.run.arms = vec![Arm::Vanilla, Arm::Sepp, Arm::SeppMerged, Arm::RandomAdd];
    // Random-add duplicates one image per pair, so the pairs must not
    // outnumber the images.
    cfg.miner.k = 30;
    let dir = tempfile::tempdir().unwrap();
    let summary = pipeline::run_pipeline(&cfg, dir.path()).unwrap();
    assert_eq!(summary.scores.len(), 4);
    let seed = dir.path().join("seed-0");
    for f in ["config.toml", "summary.csv", "timing.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert!(seed.join("embeddings.seppe").is_file());
    let pairs = sepp::formats::read_pairset(&seed.join("pairs.csv")).unwrap();
    assert!(!pairs.is_empty());
    for arm in &cfg.run.arms {
        let rows = metrics::read_metrics(&seed.join(arm.name()).join("metrics.csv")).unwrap();
        let pretrain = rows.iter().filter(|r| r.phase == "pretrain").count();
        assert_eq!(pretrain, cfg.train.epochs);
        assert_eq!(rows.last().unwrap().phase, "linear_eval");
        let mut keys: Vec<_> = rows.iter().map(|r| (r.phase.clone(), r.epoch)).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), rows.len(), "{arm:?} repeats a (phase, epoch) row");
        assert!(rows.iter().all(|r| r.wall_time_s.is_none()));
    }
    let random = summary.scores.iter().find(|s| s.arm == Arm::RandomAdd).unwrap();
    assert_eq!(random.added, pairs.len());
    let written = PipelineConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(written, cfg);
}

#[test]
fn without_pairs_sepp_trains_like_vanilla() {
    let mut cfg = small();
    cfg.miner.enabled = false;
    let dir = tempfile::tempdir().unwrap();
    let summary = pipeline::run_pipeline(&cfg, dir.path()).unwrap();
    let seed = dir.path().join("seed-0");
    assert_eq!(
        read(&seed.join("vanilla/encoder.seppw")),
        read(&seed.join("sepp/encoder.seppw"))
    );
    assert_eq!(
        read(&seed.join("vanilla/metrics.csv")),
        read(&seed.join("sepp/metrics.csv"))
    );
    assert_eq!(summary.mean_top1(Arm::Vanilla), summary.mean_top1(Arm::Sepp));
}

#[test]
fn empty_pair_set_is_not_an_error() {
    let mut cfg = small();
    cfg.miner.k = 1;
    let dir = tempfile::tempdir().unwrap();
    let summary = pipeline::run_pipeline(&cfg, dir.path()).unwrap();
    assert_eq!(summary.pair_counts, vec![(0, 0)]);
    let pairs = sepp::formats::read_pairset(&dir.path().join("seed-0/pairs.csv")).unwrap();
    assert!(pairs.is_empty());
}

#[test]
fn failures_name_their_stage() {
    let mut cfg = small();
    cfg.dataset.kind = DatasetKind::Idx;
    cfg.miner.source = sepp::config::ReferenceSource::Bootstrap;
    let dir = tempfile::tempdir().unwrap();
    cfg.dataset.train_images = Some(dir.path().join("missing.idx"));
    let err = pipeline::run_pipeline(&cfg, dir.path()).unwrap_err();
    assert_eq!(err.stage(), Some("load"));
    assert!(err.to_string().contains("missing.idx"));

    let mut cfg = small();
    cfg.train.epochs = 0;
    let err = pipeline::run_pipeline(&cfg, dir.path()).unwrap_err();
    assert_eq!(err.stage(), Some("config"));
}

#[test]
fn ablation_checks_its_k_values() {
    let mut cfg = small();
    cfg.dataset.classes = 50;
    cfg.dataset.per_class = 40;
    let data = pipeline::load_dataset(&cfg).unwrap();
    let ctx = Context::new(&cfg, &data).unwrap();
    let emb = ctx.reference(None).unwrap();
    let rows = pipeline::ablate_k(&ctx, &emb, &[500, 1000, 2000], false, 0).unwrap();
    assert!(rows.windows(2).all(|w| w[0].pair_count <= w[1].pair_count));
    assert!(rows.iter().all(|r| r.top1.is_none()));
    assert!(pipeline::ablate_k(&ctx, &emb, &[500, 2001], false, 0).is_err());
    assert!(pipeline::ablate_k(&ctx, &emb, &[1000, 500], false, 0).is_err());
}

#[test]
fn random_add_control() {
    let cfg = small();
    let data = pipeline::load_dataset(&cfg).unwrap();
    let ctx = Context::new(&cfg, &data).unwrap();
    let empty = SemanticPairSet::empty(0, 0.96, 0.99);
    let vanilla = ctx.train_arm(Arm::Vanilla, &empty, 3).unwrap();
    let (none, _) = pipeline::random_add_control(&ctx, 0, 3).unwrap();
    assert_eq!(none.params, vanilla.params);

    let n = data.train.len();
    assert!(ctx.random_duplicates(n + 1, 3).is_err());
    let picked = ctx.random_duplicates(20, 3).unwrap();
    assert_eq!(picked, ctx.random_duplicates(20, 3).unwrap());
    assert!(picked.windows(2).all(|w| w[0] < w[1]) && picked.iter().all(|&i| i < n));

    let (a, ra) = pipeline::random_add_control(&ctx, 20, 3).unwrap();
    let (b, rb) = pipeline::random_add_control(&ctx, 20, 3).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(ra.top1, rb.top1);
    assert_eq!(a.added, 20);
    assert_ne!(a.params, vanilla.params);
}

#[test]
fn loaded_pairs_must_fit_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.csv");
    std::fs::write(&path, "# k=100 min=0.96 max=0.99\nanchor,positive\n3,99\n").unwrap();
    assert!(sepp::formats::read_pairset_within(&path, Some(60)).is_err());
    assert_eq!(sepp::formats::read_pairset_within(&path, Some(100)).unwrap().len(), 1);
}

#[test]
fn mismatched_output_size_is_a_config_error() {
    let mut cfg = small();
    cfg.augment.output_size = (4, 4);
    assert!(matches!(pipeline::load_dataset(&cfg), Err(sepp::Error::Config(_))));
}
