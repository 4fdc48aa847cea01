//! Evaluation harness: run a method (identity, a classical baseline or a
//! trained checkpoint) over the holdout split, measure per-image gradient
//! information, gradient gain, reference metrics and consecutive-frame
//! DSSIM, render jet gradient-difference maps, and write one JSON report.
//!
//! Gradient quantities are computed on the 8-bit level grid in exact
//! integer arithmetic, so algebraic identities (identity gain 1, the
//! x25 gain of a 5x min-max stretch) hold exactly in the report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::data::{sha256_hex, DatasetManifest, ManifestRecord, Split};
use crate::error::{Error, Result};
use crate::frame::ImageFrame;
use crate::model::{enhance, EnhancerParams, RecurrentState};
use crate::objectives::{
    dssim_image, gradient_info_levels, log_rmse_image, ssim_image, SsimConfig,
    LEVEL_GRADIENT_SCALE,
};
use crate::util::parallel_map;

/// Clamp of the gradient-difference maps, in 8-bit gradient units.
pub const MAP_CLAMP: f64 = 30.0;

/// Piecewise-linear jet palette: 7 anchors from dark blue through green
/// to dark red. Interpolation is linear per channel with
/// round-half-away-from-zero quantization.
pub const JET_ANCHORS: [[u8; 3]; 7] = [
    [0, 0, 128],
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 0, 0],
    [128, 0, 0],
];

/// Map t in [0,1] through the jet anchors.
pub fn jet(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let segments = (JET_ANCHORS.len() - 1) as f64;
    let pos = t * segments;
    let idx = (pos.floor() as usize).min(JET_ANCHORS.len() - 2);
    let f = pos - idx as f64;
    let a = JET_ANCHORS[idx];
    let b = JET_ANCHORS[idx + 1];
    std::array::from_fn(|c| {
        let v = a[c] as f64 + (b[c] as f64 - a[c] as f64) * f;
        v.round().clamp(0.0, 255.0) as u8
    })
}

/// Per-pixel gradient magnitude on the 8-bit grid, in level units.
fn gradient_magnitude_levels(levels: &[u8], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let nx = levels[y * w + (x + 1).min(w - 1)] as f64
                - levels[y * w + x.saturating_sub(1)] as f64;
            let ny = levels[(y + 1).min(h - 1) * w + x] as f64
                - levels[y.saturating_sub(1) * w + x] as f64;
            // Central difference: half the neighbor span.
            out[y * w + x] = ((nx / 2.0).powi(2) + (ny / 2.0).powi(2)).sqrt();
        }
    }
    out
}

/// RGB rendering of |grad(output)| - |grad(input)| in 8-bit gradient
/// units, clamped to +-MAP_CLAMP and mapped through the jet palette
/// (blue = lost gradient, green = unchanged, red = gained).
pub fn gradient_diff_map(input: &ImageFrame, output: &ImageFrame) -> Result<Vec<u8>> {
    if input.width != output.width || input.height != output.height {
        return Err(Error::ShapeMismatch {
            op: "gradient_diff_map",
            left: vec![input.height, input.width],
            right: vec![output.height, output.width],
        });
    }
    let (w, h) = (input.width, input.height);
    let gin = gradient_magnitude_levels(&input.levels(), w, h);
    let gout = gradient_magnitude_levels(&output.levels(), w, h);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for (o, i) in gout.iter().zip(&gin) {
        let d = (o - i).clamp(-MAP_CLAMP, MAP_CLAMP);
        let color = jet((d + MAP_CLAMP) / (2.0 * MAP_CLAMP));
        rgb.extend_from_slice(&color);
    }
    Ok(rgb)
}

pub fn save_diff_map(input: &ImageFrame, output: &ImageFrame, path: &Path) -> Result<()> {
    let rgb = gradient_diff_map(input, output)?;
    let img = image::RgbImage::from_raw(input.width as u32, input.height as u32, rgb)
        .expect("buffer matches dimensions");
    img.save(path)
        .map_err(|e| Error::Format(format!("writing {}: {e}", path.display())))
}

/// 0/0 gain is defined as 1 (a constant image stays a constant image).
pub fn gradient_gain(g_input: u64, g_output: u64) -> f64 {
    if g_input == 0 && g_output == 0 {
        1.0
    } else {
        g_output as f64 / g_input as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EvalMethod {
    Identity,
    Normalize,
    GlobalHe,
    AdaptiveHe,
    Model(PathBuf),
}

impl EvalMethod {
    pub fn id(&self) -> String {
        match self {
            EvalMethod::Identity => "identity".into(),
            EvalMethod::Normalize => "norm".into(),
            EvalMethod::GlobalHe => "ghe".into(),
            EvalMethod::AdaptiveHe => "ahe".into(),
            EvalMethod::Model(path) => format!("model:{}", path.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub path: String,
    pub g_input: f64,
    pub g_output: f64,
    pub gradient_gain: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_rmse_to_reference: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim_to_reference: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consecutive_dssim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub gain_mean: f64,
    pub gain_median: f64,
    pub gain_fraction_above_one: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_rmse_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub consecutive_dssim_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub config_digest: String,
    pub seed: u64,
    pub map_clamp: f64,
    pub records: Vec<ImageMetrics>,
    pub aggregates: Aggregates,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Format(format!("report: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn compute_aggregates(records: &[ImageMetrics]) -> Aggregates {
    let mut gains: Vec<f64> = records.iter().map(|r| r.gradient_gain).collect();
    let n = gains.len().max(1) as f64;
    let gain_mean = gains.iter().sum::<f64>() / n;
    gains.sort_by(|a, b| a.partial_cmp(b).expect("gains are finite"));
    let gain_median = if gains.is_empty() {
        0.0
    } else if gains.len() % 2 == 1 {
        gains[gains.len() / 2]
    } else {
        (gains[gains.len() / 2 - 1] + gains[gains.len() / 2]) / 2.0
    };
    let gain_fraction_above_one =
        records.iter().filter(|r| r.gradient_gain > 1.0).count() as f64 / n;
    let mean_of = |f: fn(&ImageMetrics) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = records.iter().filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    Aggregates {
        gain_mean,
        gain_median,
        gain_fraction_above_one,
        log_rmse_mean: mean_of(|r| r.log_rmse_to_reference),
        ssim_mean: mean_of(|r| r.ssim_to_reference),
        consecutive_dssim_mean: mean_of(|r| r.consecutive_dssim),
    }
}

pub struct EvalConfig {
    pub method: EvalMethod,
    pub seed: u64,
    pub maps_dir: Option<PathBuf>,
    /// Which split to evaluate; reports default to the holdout.
    pub split: Split,
}

impl EvalConfig {
    pub fn new(method: EvalMethod) -> Self {
        EvalConfig {
            method,
            seed: 7,
            maps_dir: None,
            split: Split::Holdout,
        }
    }
}

enum Processor {
    Pointwise(fn(&ImageFrame) -> Result<ImageFrame>),
    Model(Box<Checkpoint<f32>>),
}

fn pointwise_for(method: &EvalMethod) -> Option<fn(&ImageFrame) -> Result<ImageFrame>> {
    match method {
        EvalMethod::Identity => Some(|f| Ok(f.clone())),
        EvalMethod::Normalize => Some(|f| Ok(baselines::normalize(f))),
        EvalMethod::GlobalHe => Some(|f| Ok(baselines::global_he(f))),
        EvalMethod::AdaptiveHe => Some(|f| baselines::adaptive_he(f, (8, 8), 2.0)),
        EvalMethod::Model(_) => None,
    }
}

/// One flicker stream: the records of one scene ordered by frame index,
/// with the condition advancing one grid slot per frame. Every holdout
/// record belongs to exactly one stream.
fn streams(
    manifest: &DatasetManifest,
    split: Split,
) -> Vec<Vec<&ManifestRecord>> {
    let n_cond = manifest.meta.grid.len() as u32;
    let mut groups: BTreeMap<(u32, u32), Vec<&ManifestRecord>> = BTreeMap::new();
    for rec in manifest.records.iter().filter(|r| r.split == split) {
        // Stream key: condition the stream had at frame 0.
        let start = (rec.condition_id + n_cond - rec.frame_idx % n_cond) % n_cond;
        groups.entry((rec.scene_id, start)).or_default().push(rec);
    }
    groups
        .into_values()
        .map(|mut recs| {
            recs.sort_by_key(|r| r.frame_idx);
            recs
        })
        .collect()
}

/// Evaluate a method over a manifest split and assemble the report.
/// Recurrent checkpoints process each stream in frame order with a
/// fresh state per stream; everything else is pointwise.
pub fn evaluate(manifest: &DatasetManifest, config: &EvalConfig) -> Result<MetricsReport> {
    let processor = match &config.method {
        EvalMethod::Model(path) => Processor::Model(Box::new(load_checkpoint::<f32>(path)?)),
        other => Processor::Pointwise(
            pointwise_for(other).expect("non-model methods are pointwise"),
        ),
    };

    // References of each pose, for the reference-relative metrics.
    let mut reference_of: BTreeMap<(u32, u32), &ManifestRecord> = BTreeMap::new();
    for rec in &manifest.records {
        if rec.is_reference {
            reference_of.insert((rec.scene_id, rec.frame_idx), rec);
        }
    }

    let streams = streams(manifest, config.split);
    if streams.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "manifest has no {:?} records to evaluate",
            config.split
        )));
    }

    if let Some(dir) = &config.maps_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    // Streams are independent; recurrent state lives inside one stream.
    let stream_results: Vec<Result<Vec<ImageMetrics>>> = parallel_map(&streams, |stream| {
        let mut out = Vec::with_capacity(stream.len());
        let mut state: Option<RecurrentState<f32>> = None;
        let mut prev_output: Option<ImageFrame> = None;
        for rec in stream {
            let input = manifest.load_frame(rec)?;
            let output = match &processor {
                Processor::Pointwise(f) => f(&input)?,
                Processor::Model(ck) => {
                    let (o, next) = run_model(&ck.params, &input, state.take())?;
                    state = next;
                    o
                }
            };
            // Metrics are computed on the quantized output, i.e. exactly
            // what an exported PNG would hold.
            let output = output.quantized();
            let (w, h) = (input.width, input.height);
            let g_in = gradient_info_levels(&input.levels(), w, h);
            let g_out = gradient_info_levels(&output.levels(), w, h);
            let ref_rec = reference_of
                .get(&(rec.scene_id, rec.frame_idx))
                .ok_or_else(|| {
                    Error::Format(format!(
                        "manifest has no reference record for scene {} frame {}",
                        rec.scene_id, rec.frame_idx
                    ))
                })?;
            let ref_frame = manifest.load_frame(ref_rec)?;
            let log_rmse_to_reference = Some(log_rmse_image(&output, &ref_frame)?);
            let ssim_to_reference = Some(ssim_image(&output, &ref_frame, &SsimConfig::default())?);
            let consecutive_dssim = match &prev_output {
                None => None,
                Some(prev) => Some(dssim_image(
                    &output,
                    prev,
                    &SsimConfig::without_structure(),
                )?),
            };
            if let Some(dir) = &config.maps_dir {
                let stem = Path::new(&rec.path)
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("frame");
                save_diff_map(&input, &output, &dir.join(format!("{stem}.graddiff.png")))?;
            }
            out.push(ImageMetrics {
                path: rec.path.clone(),
                g_input: g_in as f64 / LEVEL_GRADIENT_SCALE,
                g_output: g_out as f64 / LEVEL_GRADIENT_SCALE,
                gradient_gain: gradient_gain(g_in, g_out),
                log_rmse_to_reference,
                ssim_to_reference,
                consecutive_dssim,
            });
            prev_output = Some(output);
        }
        Ok(out)
    });

    let mut records = Vec::new();
    for r in stream_results {
        records.extend(r?);
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));

    let config_digest = {
        let mut desc = config.method.id().into_bytes();
        desc.extend_from_slice(format!("|split={:?}|clamp={MAP_CLAMP}", config.split).as_bytes());
        sha256_hex(&desc)
    };
    let aggregates = compute_aggregates(&records);
    Ok(MetricsReport {
        method: config.method.id(),
        config_digest,
        seed: config.seed,
        map_clamp: MAP_CLAMP,
        records,
        aggregates,
    })
}

fn run_model(
    params: &EnhancerParams<f32>,
    input: &ImageFrame,
    state: Option<RecurrentState<f32>>,
) -> Result<(ImageFrame, Option<RecurrentState<f32>>)> {
    if params.is_recurrent() {
        enhance(params, input, state.as_ref())
    } else {
        enhance(params, input, None)
    }
}
