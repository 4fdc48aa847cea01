//! Adam optimization and the three-stage training protocol: pixel-wise
//! pre-training on (variant, reference) pairs with the logarithmic RMSE,
//! siamese illumination invariance on triplets with a DSSIM coupling,
//! and temporal consistency on two-frame sequences through the recurrent
//! bottleneck (two-step backpropagation through time).
//!
//! Stages are strictly ordered: siamese resumes a pretrain checkpoint,
//! temporal resumes a siamese one. Adam moments start fresh each stage.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, StageTag};
use crate::data::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::frame::ImageFrame;
use crate::model::{EnhancerConfig, EnhancerParams, ForwardMode, ForwardPass};
use crate::objectives::{dssim_loss, log_rmse, SsimConfig};
use crate::rng::pcg_salted;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const DEFAULT_LAMBDA_LOG: f64 = 1.0;
pub const DEFAULT_LAMBDA_SSIM: f64 = 0.5;
pub const PRETRAIN_EPOCHS: usize = 20;
pub const SIAMESE_EPOCHS: usize = 10;
pub const TEMPORAL_EPOCHS: usize = 10;
pub const GRAD_CLIP_NORM: f64 = 5.0;

/// Full-scale reference dataset sizes. Desk-scale runs in this crate use
/// a few hundred samples instead; these record what the full training
/// protocol was designed around.
pub const FULL_SCALE_PRETRAIN_PAIRS: usize = 80_000;
pub const FULL_SCALE_TRIPLETS: usize = 40_000;

pub fn default_epochs(stage: StageTag) -> usize {
    match stage {
        StageTag::Pretrain => PRETRAIN_EPOCHS,
        StageTag::Siamese => SIAMESE_EPOCHS,
        StageTag::Temporal => TEMPORAL_EPOCHS,
    }
}

/// Adam hyper-parameters (bias-corrected first/second moments).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: DEFAULT_LEARNING_RATE,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update on a single parameter buffer.
/// Rejects non-finite gradients, naming the parameter and step.
pub fn adam_update<T: Scalar>(
    name: &str,
    theta: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    hyper: &AdamHyper,
) -> Result<()> {
    if theta.len() != grad.len() || theta.len() != m.len() || theta.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_update",
            left: vec![theta.len()],
            right: vec![grad.len()],
        });
    }
    let b1 = T::from_f64(hyper.beta1);
    let b2 = T::from_f64(hyper.beta2);
    let one = T::ONE;
    let lr = T::from_f64(hyper.learning_rate);
    let eps = T::from_f64(hyper.eps);
    let corr1 = T::from_f64(1.0 - hyper.beta1.powi(t as i32));
    let corr2 = T::from_f64(1.0 - hyper.beta2.powi(t as i32));
    for i in 0..theta.len() {
        let g = grad[i];
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter \"{name}\" at step {t}"
            )));
        }
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        theta[i] = theta[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Per-parameter moment buffers aligned with the model's canonical
/// parameter order; `t` counts optimizer steps.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub hyper: AdamHyper,
    pub t: u64,
    moments: Vec<(String, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &EnhancerParams<T>, hyper: AdamHyper) -> Self {
        let moments = params
            .learnable()
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    vec![T::ZERO; p.data.len()],
                    vec![T::ZERO; p.data.len()],
                )
            })
            .collect();
        AdamState {
            hyper,
            t: 0,
            moments,
        }
    }

    /// Apply one step over every learnable parameter. `grads` maps the
    /// parameter name to its gradient buffer.
    pub fn step(
        &mut self,
        params: &mut EnhancerParams<T>,
        grads: &std::collections::BTreeMap<String, Vec<T>>,
    ) -> Result<()> {
        self.t += 1;
        let t = self.t;
        let hyper = self.hyper;
        for (param, (name, m, v)) in params.learnable_mut().into_iter().zip(&mut self.moments) {
            if &param.name != name {
                return Err(Error::Graph(format!(
                    "optimizer state misaligned: parameter \"{}\" vs moments \"{name}\"",
                    param.name
                )));
            }
            let Some(grad) = grads.get(name) else {
                continue;
            };
            adam_update(name, &mut param.data, grad, m, v, t, &hyper)?;
        }
        Ok(())
    }
}

/// Training configuration; the JSON config file mirrors these fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: StageTag,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_log: f64,
    pub lambda_ssim: f64,
    pub seed: u64,
    pub widths: [usize; 3],
}

impl TrainConfig {
    pub fn default_for(stage: StageTag) -> Self {
        TrainConfig {
            stage,
            epochs: default_epochs(stage),
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            lambda_log: DEFAULT_LAMBDA_LOG,
            lambda_ssim: DEFAULT_LAMBDA_SSIM,
            seed: 7,
            widths: EnhancerConfig::default().widths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.lambda_log < 0.0 || self.lambda_ssim < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
        }
        if self.lambda_log == 0.0 && self.lambda_ssim == 0.0 {
            return Err(Error::InvalidArgument(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One training-log line (JSON-lines on disk, one record per epoch).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: StageTag,
    pub epoch: usize,
    pub mean_loss: f64,
    pub holdout_loss: Option<f64>,
    pub wall_ms: u64,
    pub seed: u64,
}

pub fn write_logs(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut buf = Vec::new();
    for log in logs {
        serde_json::to_writer(&mut buf, log)
            .map_err(|e| Error::Format(format!("training log: {e}")))?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: EnhancerParams<f32>,
    pub stage: StageTag,
    pub seed: u64,
    pub logs: Vec<EpochLog>,
}

/// In-memory training sample: one or two inputs plus their references.
struct Sample {
    inputs: Vec<ImageFrame>,
    refs: Vec<ImageFrame>,
    paths: Vec<String>,
}

fn load_samples(
    manifest: &DatasetManifest,
    stage: StageTag,
    split: Split,
) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    match stage {
        StageTag::Pretrain => {
            let pairs = manifest.pairs(split)?;
            for p in pairs {
                out.push(Sample {
                    inputs: vec![manifest.load_frame(p.variant)?],
                    refs: vec![manifest.load_frame(p.reference)?],
                    paths: vec![p.variant.path.clone(), p.reference.path.clone()],
                });
            }
        }
        StageTag::Siamese => {
            for t in manifest.triplets(split)? {
                out.push(Sample {
                    inputs: vec![manifest.load_frame(t.y1)?, manifest.load_frame(t.y2)?],
                    refs: vec![manifest.load_frame(t.reference)?],
                    paths: vec![t.y1.path.clone(), t.y2.path.clone(), t.reference.path.clone()],
                });
            }
        }
        StageTag::Temporal => {
            for q in manifest.temporal(split)? {
                out.push(Sample {
                    inputs: vec![manifest.load_frame(q.x[0])?, manifest.load_frame(q.x[1])?],
                    refs: vec![manifest.load_frame(q.refs[0])?, manifest.load_frame(q.refs[1])?],
                    paths: vec![q.x[0].path.clone(), q.x[1].path.clone()],
                });
            }
        }
    }
    if out.is_empty() && split == Split::Train {
        return Err(Error::InvalidArgument(format!(
            "manifest provides no {} training samples",
            stage.name()
        )));
    }
    Ok(out)
}

/// Loss of one sample through an already bound pass.
fn sample_loss<'g>(
    pass: &mut ForwardPass<'g, f32>,
    graph: &'g Graph<f32>,
    sample: &Sample,
    stage: StageTag,
    lambda_log: f32,
    lambda_ssim: f32,
) -> Result<Tensor<'g, f32>> {
    match stage {
        StageTag::Pretrain => {
            let x = sample.inputs[0].to_tensor(graph)?;
            let r = sample.refs[0].to_tensor(graph)?;
            let (o, _) = pass.run(x, None)?;
            log_rmse(o, r)
        }
        StageTag::Siamese => {
            let x1 = sample.inputs[0].to_tensor(graph)?;
            let x2 = sample.inputs[1].to_tensor(graph)?;
            let r = sample.refs[0].to_tensor(graph)?;
            let (o1, _) = pass.run(x1, None)?;
            let (o2, _) = pass.run(x2, None)?;
            let pixel = log_rmse(o1, r)?.add(log_rmse(o2, r)?)?;
            let coupling = dssim_loss(o1, o2, &SsimConfig::default())?;
            pixel
                .scalar_mul(lambda_log)
                .add(coupling.scalar_mul(lambda_ssim))
        }
        StageTag::Temporal => {
            let x0 = sample.inputs[0].to_tensor(graph)?;
            let x1 = sample.inputs[1].to_tensor(graph)?;
            let r0 = sample.refs[0].to_tensor(graph)?;
            let r1 = sample.refs[1].to_tensor(graph)?;
            let state0 = pass.zero_state()?;
            let (o0, state1) = pass.run(x0, Some(&state0))?;
            let state1 = state1.ok_or_else(|| {
                Error::Architecture("temporal stage requires a recurrent model".into())
            })?;
            let (o1, _) = pass.run(x1, Some(&state1))?;
            let pixel = log_rmse(o0, r0)?.add(log_rmse(o1, r1)?)?;
            let coupling = dssim_loss(o0, o1, &SsimConfig::without_structure())?;
            pixel
                .scalar_mul(lambda_log)
                .add(coupling.scalar_mul(lambda_ssim))
        }
    }
}

fn mean_holdout_loss(
    params: &EnhancerParams<f32>,
    samples: &[Sample],
    stage: StageTag,
    lambda_log: f32,
    lambda_ssim: f32,
) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut acc = 0.0f64;
    for sample in samples {
        let graph: Graph<f32> = Graph::new();
        // Per-frame statistics, matching both training and enhancement.
        let mut pass = ForwardPass::bind(&graph, params, ForwardMode::Train, false)?;
        let loss = sample_loss(&mut pass, &graph, sample, stage, lambda_log, lambda_ssim)?;
        acc += loss.item()?.to_f64();
    }
    Ok(Some(acc / samples.len() as f64))
}

/// Resolve the parameters a stage starts from, enforcing stage order.
fn starting_params(
    config: &TrainConfig,
    resume: Option<Checkpoint<f32>>,
) -> Result<EnhancerParams<f32>> {
    match (config.stage, resume) {
        (StageTag::Pretrain, None) => EnhancerParams::init(
            &EnhancerConfig {
                widths: config.widths,
                recurrent: false,
            },
            config.seed,
        ),
        (StageTag::Pretrain, Some(ck)) => {
            if ck.stage != StageTag::Pretrain {
                return Err(Error::StageOrder(format!(
                    "pretrain can only resume a pretrain checkpoint, found {}",
                    ck.stage
                )));
            }
            Ok(ck.params)
        }
        (StageTag::Siamese, Some(ck)) => {
            if !matches!(ck.stage, StageTag::Pretrain | StageTag::Siamese) {
                return Err(Error::StageOrder(format!(
                    "siamese training requires a pretrain checkpoint, found {}",
                    ck.stage
                )));
            }
            Ok(ck.params)
        }
        (StageTag::Siamese, None) => Err(Error::StageOrder(
            "siamese training requires a pretrain checkpoint".into(),
        )),
        (StageTag::Temporal, Some(ck)) => {
            if !matches!(ck.stage, StageTag::Siamese | StageTag::Temporal) {
                return Err(Error::StageOrder(format!(
                    "temporal training requires a siamese checkpoint, found {}",
                    ck.stage
                )));
            }
            // The recurrent bottleneck joins here; convolutional weights
            // carry over, LSTM weights start fresh from the run seed.
            Ok(ck.params.into_recurrent(config.seed))
        }
        (StageTag::Temporal, None) => Err(Error::StageOrder(
            "temporal training requires a siamese checkpoint".into(),
        )),
    }
}

/// Run one training stage to completion. Deterministic for a fixed
/// config and manifest: same checkpoints, same loss trajectory.
pub fn train(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    resume: Option<Checkpoint<f32>>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = starting_params(config, resume)?;
    if config.stage == StageTag::Temporal && !params.is_recurrent() {
        return Err(Error::Architecture(
            "temporal training requires a recurrent model".into(),
        ));
    }
    let samples = load_samples(manifest, config.stage, Split::Train)?;
    let holdout = load_samples(manifest, config.stage, Split::Holdout)?;
    let lambda_log = config.lambda_log as f32;
    let lambda_ssim = config.lambda_ssim as f32;
    let hyper = AdamHyper {
        learning_rate: config.learning_rate,
        ..AdamHyper::default()
    };
    let mut adam = AdamState::new(&params, hyper);
    let mut logs = Vec::with_capacity(config.epochs);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        {
            use rand::seq::SliceRandom;
            let mut rng = pcg_salted(
                config.seed,
                (config.stage.code() as u64) << 32 | epoch as u64,
            );
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let graph: Graph<f32> = Graph::new();
            let mut pass = ForwardPass::bind(&graph, &params, ForwardMode::Train, true)?;
            let batch_paths = || -> String {
                batch
                    .iter()
                    .flat_map(|&i| samples[i].paths.iter().map(String::as_str))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            let mut total: Option<Tensor<'_, f32>> = None;
            for &idx in batch {
                let loss = sample_loss(
                    &mut pass,
                    &graph,
                    &samples[idx],
                    config.stage,
                    lambda_log,
                    lambda_ssim,
                )
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!(
                        "{msg} (epoch {epoch}; batch records: {})",
                        batch_paths()
                    )),
                    other => other,
                })?;
                total = Some(match total {
                    None => loss,
                    Some(t) => t.add(loss)?,
                });
            }
            let total = total
                .expect("batches are never empty")
                .scalar_mul(1.0 / batch.len() as f32);
            let batch_loss = total.item()?.to_f64();
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {batch_loss} in epoch {epoch}; batch records: {}",
                    batch_paths()
                )));
            }
            total.backward()?;

            let mut grads = std::collections::BTreeMap::new();
            for (name, leaf) in pass.leaves() {
                let g = leaf.grad().ok_or_else(|| {
                    Error::Graph(format!("parameter \"{name}\" received no gradient"))
                })?;
                grads.insert(name.clone(), g);
            }
            clip_global_norm(&mut grads, GRAD_CLIP_NORM as f32);
            pass.store_running(&mut params);
            adam.step(&mut params, &grads)?;
            epoch_loss += batch_loss * batch.len() as f64;
        }
        let mean_loss = epoch_loss / samples.len() as f64;
        let holdout_loss =
            mean_holdout_loss(&params, &holdout, config.stage, lambda_log, lambda_ssim)?;
        logs.push(EpochLog {
            stage: config.stage,
            epoch,
            mean_loss,
            holdout_loss,
            wall_ms: started.elapsed().as_millis() as u64,
            seed: config.seed,
        });
    }

    Ok(TrainOutcome {
        params,
        stage: config.stage,
        seed: config.seed,
        logs,
    })
}

fn clip_global_norm(grads: &mut std::collections::BTreeMap<String, Vec<f32>>, max_norm: f32) {
    let mut sq = 0.0f64;
    for g in grads.values() {
        for &v in g {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Pixel-wise pre-training (stage 1).
pub fn train_pretrain(config: &TrainConfig, manifest: &DatasetManifest) -> Result<TrainOutcome> {
    let mut config = config.clone();
    config.stage = StageTag::Pretrain;
    train(&config, manifest, None)
}

/// Siamese invariance training (stage 2).
pub fn train_siamese(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    pretrained: Checkpoint<f32>,
) -> Result<TrainOutcome> {
    let mut config = config.clone();
    config.stage = StageTag::Siamese;
    train(&config, manifest, Some(pretrained))
}

/// Temporal-consistency training of the recurrent model (stage 3).
pub fn train_temporal(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    siamese: Checkpoint<f32>,
) -> Result<TrainOutcome> {
    let mut config = config.clone();
    config.stage = StageTag::Temporal;
    train(&config, manifest, Some(siamese))
}
