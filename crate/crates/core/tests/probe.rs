//! Manual calibration probe (ignored by default): prints the stage-1
//! loss trajectory at desk scale.

use lumen_core::checkpoint::StageTag;
use lumen_core::data::{default_grid, generate_dataset};
use lumen_core::train::{train, TrainConfig};

#[test]
#[ignore]
fn probe_stage1_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(7, 6, 4, 64, 48, &default_grid(), 0.9, dir.path()).unwrap();
    let pairs = manifest.pairs(lumen_core::data::Split::Train).unwrap();
    eprintln!("train pairs: {}", pairs.len());

    let mut config = TrainConfig::default_for(StageTag::Pretrain);
    config.epochs = 10;
    config.seed = 7;
    let outcome = train(&config, &manifest, None).unwrap();
    for log in &outcome.logs {
        eprintln!(
            "epoch {:2}  mean_loss {:.6}  holdout {:?}  ({} ms)",
            log.epoch, log.mean_loss, log.holdout_loss, log.wall_ms
        );
    }
    let first = outcome.logs.first().unwrap().mean_loss;
    let last = outcome.logs.last().unwrap().mean_loss;
    eprintln!("ratio last/first = {:.4}", last / first);
}

#[test]
#[ignore]
fn probe_stage2_stage3_quality() {
    use lumen_core::checkpoint::Checkpoint;
    use lumen_core::data::Split;
    use lumen_core::model::enhance;
    use lumen_core::objectives::{
        gradient_info_levels, log_rmse_image, ssim_image, SsimConfig,
    };

    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(7, 6, 4, 64, 48, &default_grid(), 0.9, dir.path()).unwrap();

    // Desk-scale stage 1, two phases: coarse then fine.
    let mut cfg = TrainConfig::default_for(StageTag::Pretrain);
    cfg.seed = 7;
    cfg.learning_rate = 3e-3;
    cfg.epochs = 12;
    let t = std::time::Instant::now();
    let s1a = train(&cfg, &manifest, None).unwrap();
    let mut cfg = TrainConfig::default_for(StageTag::Pretrain);
    cfg.seed = 8;
    cfg.learning_rate = 8e-4;
    cfg.epochs = 6;
    let s1 = train(
        &cfg,
        &manifest,
        Some(Checkpoint {
            stage: StageTag::Pretrain,
            seed: 7,
            params: s1a.params,
        }),
    )
    .unwrap();
    eprintln!("stage1(desk, two-phase): {:?}", t.elapsed());
    for log in s1a.logs.iter().chain(&s1.logs).step_by(3) {
        eprintln!("  epoch {:2} loss {:.4} holdout {:?}", log.epoch, log.mean_loss, log.holdout_loss);
    }

    // Desk-scale stage 2: a gentler invariance nudge on top.
    let mut cfg = TrainConfig::default_for(StageTag::Siamese);
    cfg.seed = 7;
    cfg.learning_rate = 2e-3;
    cfg.epochs = 10;
    let t = std::time::Instant::now();
    let s2 = train(
        &cfg,
        &manifest,
        Some(Checkpoint {
            stage: StageTag::Pretrain,
            seed: 7,
            params: s1.params.clone(),
        }),
    )
    .unwrap();
    eprintln!("stage2: {:?}", t.elapsed());
    for log in s2.logs.iter().step_by(4) {
        eprintln!("  epoch {:2} loss {:.4} holdout {:?}", log.epoch, log.mean_loss, log.holdout_loss);
    }

    // Criterion-4 statistic.
    let cfg_ssim = SsimConfig::default();
    let triplets = manifest.triplets(Split::Holdout).unwrap();
    let (mut before, mut after) = (0.0, 0.0);
    for t in &triplets {
        let y1 = manifest.load_frame(t.y1).unwrap();
        let y2 = manifest.load_frame(t.y2).unwrap();
        before += ssim_image(&y1, &y2, &cfg_ssim).unwrap();
        let (o1, _) = enhance(&s2.params, &y1, None).unwrap();
        let (o2, _) = enhance(&s2.params, &y2, None).unwrap();
        after += ssim_image(&o1.quantized(), &o2.quantized(), &cfg_ssim).unwrap();
    }
    before /= triplets.len() as f64;
    after /= triplets.len() as f64;
    eprintln!("c4: ssim inputs {before:.4} outputs {after:.4} uplift {:+.4}", after - before);

    // Criterion-5 statistics on (gamma 1.8, contrast 0.5) holdout.
    let cond = manifest.meta.grid.iter().find(|c| c.gamma == 1.8 && c.contrast == 0.5).unwrap().condition_id;
    let mut refs = std::collections::BTreeMap::new();
    for rec in &manifest.records {
        if rec.is_reference {
            refs.insert((rec.scene_id, rec.frame_idx), rec);
        }
    }
    let c5_stats = |params: &lumen_core::model::EnhancerParams<f32>, label: &str| {
        let (mut gains, mut rin, mut rout, mut n) = (0.0, 0.0, 0.0, 0);
        for rec in manifest.records.iter().filter(|r| r.split == Split::Holdout && r.condition_id == cond) {
            let input = manifest.load_frame(rec).unwrap();
            let (out, _) = enhance(params, &input, None).unwrap();
            let out = out.quantized();
            let g_in = gradient_info_levels(&input.levels(), 64, 48);
            let g_out = gradient_info_levels(&out.levels(), 64, 48);
            gains += g_out as f64 / g_in as f64;
            let reference = manifest.load_frame(refs[&(rec.scene_id, rec.frame_idx)]).unwrap();
            rin += log_rmse_image(&input, &reference).unwrap();
            rout += log_rmse_image(&out, &reference).unwrap();
            n += 1;
        }
        eprintln!(
            "c5[{label}]: n={n} mean gain {:.3} rmse_in {:.4} rmse_out {:.4}",
            gains / n as f64, rin / n as f64, rout / n as f64
        );
    };
    c5_stats(&s1.params, "stage1");
    c5_stats(&s2.params, "stage2");

    // Desk-scale stage 3 and the criterion-6 statistic.
    let mut cfg = TrainConfig::default_for(StageTag::Temporal);
    cfg.seed = 7;
    cfg.learning_rate = 1e-3;
    let t = std::time::Instant::now();
    let s3 = train(
        &cfg,
        &manifest,
        Some(Checkpoint {
            stage: StageTag::Siamese,
            seed: 7,
            params: s2.params.clone(),
        }),
    )
    .unwrap();
    eprintln!("stage3: {:?}", t.elapsed());
    let no_struct = SsimConfig::without_structure();
    let quads = manifest.temporal(Split::Holdout).unwrap();
    let (mut din, mut dout) = (0.0, 0.0);
    for q in &quads {
        let x0 = manifest.load_frame(q.x[0]).unwrap();
        let x1 = manifest.load_frame(q.x[1]).unwrap();
        din += lumen_core::objectives::dssim_image(&x1, &x0, &no_struct).unwrap();
        let (o0, st) = enhance(&s3.params, &x0, None).unwrap();
        let (o1, _) = enhance(&s3.params, &x1, st.as_ref()).unwrap();
        dout += lumen_core::objectives::dssim_image(&o1.quantized(), &o0.quantized(), &no_struct).unwrap();
    }
    eprintln!(
        "c6: consecutive dssim inputs {:.4} outputs {:.4} (n={})",
        din / quads.len() as f64, dout / quads.len() as f64, quads.len()
    );
}
