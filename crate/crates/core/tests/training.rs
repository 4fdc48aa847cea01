//! Trainer integration tests on a miniature dataset: determinism,
//! siamese weight sharing, the recurrent unroll, and the non-finite
//! abort path.

use lumen_core::checkpoint::{Checkpoint, StageTag};
use lumen_core::data::{default_grid, generate_dataset, DatasetManifest};
use lumen_core::error::Error;
use lumen_core::model::{EnhancerParams, ForwardMode, ForwardPass};
use lumen_core::tensor::Graph;
use lumen_core::train::{train, TrainConfig};

fn small_manifest(dir: &tempfile::TempDir, seed: u64) -> DatasetManifest {
    generate_dataset(seed, 2, 2, 16, 16, &default_grid(), 0.5, dir.path()).unwrap()
}

fn small_config(stage: StageTag) -> TrainConfig {
    let mut cfg = TrainConfig::default_for(stage);
    cfg.epochs = 2;
    cfg.seed = 3;
    cfg.widths = [2, 3, 4];
    cfg
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_manifest(&dir, 21);
    let cfg = small_config(StageTag::Pretrain);
    let a = train(&cfg, &manifest, None).unwrap();
    let b = train(&cfg, &manifest, None).unwrap();
    assert_eq!(a.params.digest(), b.params.digest());
    for (la, lb) in a.logs.iter().zip(&b.logs) {
        assert_eq!(la.mean_loss.to_bits(), lb.mean_loss.to_bits());
        assert_eq!(
            la.holdout_loss.map(f64::to_bits),
            lb.holdout_loss.map(f64::to_bits)
        );
    }
    let c = {
        let mut cfg = cfg.clone();
        cfg.seed = 4;
        train(&cfg, &manifest, None).unwrap()
    };
    assert_ne!(a.params.digest(), c.params.digest());
}

#[test]
fn losses_are_finite_and_logged_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_manifest(&dir, 22);
    let cfg = small_config(StageTag::Pretrain);
    let out = train(&cfg, &manifest, None).unwrap();
    assert_eq!(out.logs.len(), cfg.epochs);
    for (i, log) in out.logs.iter().enumerate() {
        assert_eq!(log.epoch, i + 1);
        assert!(log.mean_loss.is_finite());
        assert!(log.holdout_loss.unwrap().is_finite());
        assert_eq!(log.seed, cfg.seed);
    }
}

#[test]
fn full_stage_chain_runs_and_tags_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_manifest(&dir, 23);
    let s1 = train(&small_config(StageTag::Pretrain), &manifest, None).unwrap();
    assert_eq!(s1.stage, StageTag::Pretrain);
    let s2 = train(
        &small_config(StageTag::Siamese),
        &manifest,
        Some(Checkpoint {
            stage: s1.stage,
            seed: s1.seed,
            params: s1.params,
        }),
    )
    .unwrap();
    assert_eq!(s2.stage, StageTag::Siamese);
    assert!(!s2.params.is_recurrent());
    let s3 = train(
        &small_config(StageTag::Temporal),
        &manifest,
        Some(Checkpoint {
            stage: s2.stage,
            seed: s2.seed,
            params: s2.params,
        }),
    )
    .unwrap();
    assert_eq!(s3.stage, StageTag::Temporal);
    assert!(s3.params.is_recurrent(), "temporal stage attaches the LSTM");
}

#[test]
fn siamese_branches_share_one_parameter_set() {
    // Weight sharing by construction: a bound pass exposes exactly one
    // leaf per learnable parameter no matter how many branches run.
    let params: EnhancerParams<f32> = EnhancerParams::init(
        &lumen_core::model::EnhancerConfig {
            widths: [2, 3, 4],
            recurrent: false,
        },
        5,
    )
    .unwrap();
    let graph: Graph<f32> = Graph::new();
    let mut pass = ForwardPass::bind(&graph, &params, ForwardMode::Train, true).unwrap();
    let x1 = graph.constant(vec![0.4; 256], &[1, 1, 16, 16]).unwrap();
    let x2 = graph.constant(vec![0.6; 256], &[1, 1, 16, 16]).unwrap();
    let (o1, _) = pass.run(x1, None).unwrap();
    let (o2, _) = pass.run(x2, None).unwrap();
    assert_eq!(pass.leaves().len(), params.learnable().len());
    // Both branch losses reach every shared leaf.
    o1.mean().add(o2.mean()).unwrap().backward().unwrap();
    for (name, leaf) in pass.leaves() {
        assert!(leaf.grad().is_some(), "no gradient reached {name}");
    }
}

#[test]
fn non_finite_loss_aborts_with_batch_records() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_manifest(&dir, 24);
    let cfg = small_config(StageTag::Pretrain);
    let mut params = EnhancerParams::<f32>::init(
        &lumen_core::model::EnhancerConfig {
            widths: cfg.widths,
            recurrent: false,
        },
        cfg.seed,
    )
    .unwrap();
    params.merge.weight.data[0] = f32::NAN;
    let err = train(
        &cfg,
        &manifest,
        Some(Checkpoint {
            stage: StageTag::Pretrain,
            seed: 1,
            params,
        }),
    )
    .unwrap_err();
    match err {
        Error::Numeric(msg) => {
            assert!(msg.contains(".png"), "batch records missing: {msg}");
        }
        other => panic!("expected a numeric abort, got {other}"),
    }
}
