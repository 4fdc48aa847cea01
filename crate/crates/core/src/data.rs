//! Synthetic training data: procedural scenes, the photometric condition
//! grid, reference selection by gradient information, and the dataset
//! manifest with its pair/triplet/temporal samplers.
//!
//! Scenes are textured canvases; each frame is an integer-pixel crop so
//! consecutive frames differ by pure translation. Texture mass sits in
//! the mid-band while small hard-edged saturation anchors give every
//! frame true blacks and whites, the way HDR footage clips.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::RngExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frame::{FrameMeta, ImageFrame};
use crate::objectives::gradient_info_levels;
use crate::rng::pcg_salted;
use crate::util::parallel_map;

/// One photometric condition: gamma first, then contrast about mid-gray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub condition_id: u32,
    pub gamma: f64,
    pub contrast: f64,
}

impl ConditionSpec {
    pub fn is_identity(&self) -> bool {
        self.gamma == 1.0 && self.contrast == 1.0
    }
}

/// The default 12-condition grid: gamma in {0.4, 0.7, 1.0, 1.8} crossed
/// with contrast in {0.5, 1.0, 1.6}; contains exactly one identity.
pub fn default_grid() -> Vec<ConditionSpec> {
    let gammas = [0.4, 0.7, 1.0, 1.8];
    let contrasts = [0.5, 1.0, 1.6];
    let mut grid = Vec::with_capacity(12);
    for (gi, &gamma) in gammas.iter().enumerate() {
        for (ci, &contrast) in contrasts.iter().enumerate() {
            grid.push(ConditionSpec {
                condition_id: (gi * contrasts.len() + ci) as u32,
                gamma,
                contrast,
            });
        }
    }
    grid
}

pub fn validate_grid(grid: &[ConditionSpec]) -> Result<()> {
    if grid.len() != 12 {
        return Err(Error::InvalidArgument(format!(
            "condition grid must hold 12 specs, got {}",
            grid.len()
        )));
    }
    let mut ids = std::collections::BTreeSet::new();
    let mut identities = 0;
    for spec in grid {
        if !(spec.gamma > 0.0) || !(spec.contrast > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "condition {} has non-positive gamma or contrast",
                spec.condition_id
            )));
        }
        if !ids.insert(spec.condition_id) {
            return Err(Error::InvalidArgument(format!(
                "duplicate condition_id {}",
                spec.condition_id
            )));
        }
        if spec.is_identity() {
            identities += 1;
        }
    }
    for (a_idx, a) in grid.iter().enumerate() {
        for b in &grid[a_idx + 1..] {
            if a.gamma == b.gamma && a.contrast == b.contrast {
                return Err(Error::InvalidArgument(format!(
                    "degenerate grid: conditions {} and {} are identical",
                    a.condition_id, b.condition_id
                )));
            }
        }
    }
    if identities != 1 {
        return Err(Error::InvalidArgument(format!(
            "grid must contain exactly one identity condition, found {identities}"
        )));
    }
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<Vec<ConditionSpec>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let grid: Vec<ConditionSpec> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("grid config: {e}")))?;
    validate_grid(&grid)?;
    Ok(grid)
}

/// Apply a photometric condition:
/// out = clamp(((in^gamma) - 0.5) * contrast + 0.5, 0, 1).
/// Monotone non-decreasing in the input for every valid spec.
pub fn apply_condition(frame: &ImageFrame, spec: &ConditionSpec) -> Result<ImageFrame> {
    if !(spec.gamma > 0.0) || !(spec.contrast > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "condition {}: gamma and contrast must be positive",
            spec.condition_id
        )));
    }
    // The identity condition must be the exact identity map, which the
    // formula is not under floating-point rounding.
    let pixels = if spec.is_identity() {
        frame.pixels.clone()
    } else {
        frame
            .pixels
            .iter()
            .map(|&v| ((v.powf(spec.gamma) - 0.5) * spec.contrast + 0.5).clamp(0.0, 1.0))
            .collect()
    };
    ImageFrame::new(
        frame.width,
        frame.height,
        pixels,
        FrameMeta {
            condition_id: Some(spec.condition_id),
            ..frame.meta
        },
    )
}

/// True when the condition would push any pixel outside [0,1] before the
/// clamp, i.e. the variant saturates somewhere.
pub fn condition_clips(frame: &ImageFrame, spec: &ConditionSpec) -> bool {
    frame.pixels.iter().any(|&v| {
        let raw = (v.powf(spec.gamma) - 0.5) * spec.contrast + 0.5;
        !(0.0..=1.0).contains(&raw)
    })
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").expect("writing to a String cannot fail");
    }
    s
}

/// Pick the reference among condition variants of one pose: the argmax
/// of gradient information on the 8-bit grid, ties broken by the lowest
/// condition id.
pub fn select_reference(variants: &[ImageFrame]) -> Result<usize> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument(
            "select_reference: empty variant list".into(),
        ));
    }
    let shape = (variants[0].width, variants[0].height);
    let mut best: Option<(u64, u32, usize)> = None;
    for (idx, v) in variants.iter().enumerate() {
        if (v.width, v.height) != shape {
            return Err(Error::ShapeMismatch {
                op: "select_reference",
                left: vec![shape.1, shape.0],
                right: vec![v.height, v.width],
            });
        }
        let g = gradient_info_levels(&v.levels(), v.width, v.height);
        let cond = v.meta.condition_id.unwrap_or(u32::MAX);
        let candidate = (g, cond, idx);
        best = Some(match best {
            None => candidate,
            Some(b) => {
                if g > b.0 || (g == b.0 && cond < b.1) {
                    candidate
                } else {
                    b
                }
            }
        });
    }
    Ok(best.unwrap().2)
}

/// A generated scene: frames plus the crop origin of each frame on the
/// shared canvas (consecutive frames differ only by this translation).
#[derive(Debug, Clone)]
pub struct Scene {
    pub scene_id: u32,
    pub frames: Vec<ImageFrame>,
    pub offsets: Vec<(i32, i32)>,
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Render one textured canvas and cut `frames` crops of `width x height`
/// out of it, each shifted 1-3 px per axis from the previous one.
pub fn generate_scene(
    seed: u64,
    scene_id: u32,
    frames: usize,
    width: usize,
    height: usize,
) -> Result<Scene> {
    if frames == 0 {
        return Err(Error::InvalidArgument(
            "generate_scene: frames must be >= 1".into(),
        ));
    }
    if !width.is_multiple_of(8) || !height.is_multiple_of(8) {
        return Err(Error::InvalidArgument(format!(
            "dimensions must be divisible by 8, got {width}x{height}"
        )));
    }
    let mut rng = pcg_salted(seed, 0x5ce0 ^ scene_id as u64);
    let margin = 3 * frames + 8;
    let (cw, ch) = (width + 2 * margin, height + 2 * margin);

    // Mid-band background ramp. The bulk of the gradient mass stays in
    // the mid intensities, where the identity condition preserves more
    // gradient energy than any gamma/contrast distortion.
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let lo = rng.random_range(0.33..0.36);
    let hi = rng.random_range(0.40..0.44);
    let diag = ((cw * cw + ch * ch) as f64).sqrt();
    let mut canvas = vec![0.0f64; cw * ch];
    for y in 0..ch {
        for x in 0..cw {
            let t = ((x as f64 * dx + y as f64 * dy) / diag + 1.0) / 2.0;
            canvas[y * cw + x] = lo + (hi - lo) * t;
        }
    }

    // Soft-edged mid-band rectangles.
    let n_rects = rng.random_range(6..=10);
    for _ in 0..n_rects {
        let rw = rng.random_range(8..=32) as f64 / 2.0;
        let rh = rng.random_range(8..=32) as f64 / 2.0;
        let cx = rng.random_range(0.0..cw as f64);
        let cy = rng.random_range(0.0..ch as f64);
        let intensity = rng.random_range(0.32..0.44);
        let edge = rng.random_range(1.5..3.0);
        let x0 = ((cx - rw - edge).floor().max(0.0)) as usize;
        let x1 = ((cx + rw + edge).ceil().min(cw as f64 - 1.0)) as usize;
        let y0 = ((cy - rh - edge).floor().max(0.0)) as usize;
        let y1 = ((cy + rh + edge).ceil().min(ch as f64 - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let depth_x = rw - (x as f64 - cx).abs();
                let depth_y = rh - (y as f64 - cy).abs();
                let depth = depth_x.min(depth_y);
                let wgt = smoothstep((depth + edge) / edge - 1.0);
                if wgt > 0.0 {
                    let v = &mut canvas[y * cw + x];
                    *v = *v * (1.0 - wgt) + intensity * wgt;
                }
            }
        }
    }

    // Band-limited noise: a coarse grid upsampled bilinearly.
    let cell = 3usize;
    let (gw, gh) = (cw / cell + 2, ch / cell + 2);
    let amp = 0.08;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-amp..amp)).collect();
    for y in 0..ch {
        for x in 0..cw {
            let fx = x as f64 / cell as f64;
            let fy = y as f64 / cell as f64;
            let (ix, iy) = (fx as usize, fy as usize);
            let (tx, ty) = (fx - ix as f64, fy - iy as f64);
            let g00 = grid[iy * gw + ix];
            let g01 = grid[iy * gw + ix + 1];
            let g10 = grid[(iy + 1) * gw + ix];
            let g11 = grid[(iy + 1) * gw + ix + 1];
            let noise = g00 * (1.0 - tx) * (1.0 - ty)
                + g01 * tx * (1.0 - ty)
                + g10 * (1.0 - tx) * ty
                + g11 * tx * ty;
            let v = &mut canvas[y * cw + x];
            *v = (*v + noise).clamp(0.0, 1.0);
        }
    }

    // Two small flat saturation anchors (one black, one white), placed
    // in the region every crop covers. They stand in for the saturated
    // spots of HDR footage and guarantee that every contrast-boosted
    // variant of every frame clips.
    let max_dev = (3 * (frames - 1)).min(width / 4).min(height / 4);
    for dark in [true, false] {
        let size = 1usize;
        let x0 = rng.random_range(margin + max_dev..margin + width - max_dev - size);
        let y0 = rng.random_range(margin + max_dev..margin + height - max_dev - size);
        let intensity = if dark {
            rng.random_range(0.005..0.02)
        } else {
            rng.random_range(0.91..0.94)
        };
        for y in y0..y0 + size {
            for x in x0..x0 + size {
                canvas[y * cw + x] = intensity;
            }
        }
    }

    // Snap the canvas to the 8-bit grid so crops equal their PNG files.
    for v in canvas.iter_mut() {
        *v = (*v * 255.0).round() / 255.0;
    }

    // Camera walk: 1-3 px per axis per frame, reflected at the deviation
    // bound so the anchors stay inside every crop.
    let mut positions = Vec::with_capacity(frames);
    let (mut px, mut py) = (margin as i32, margin as i32);
    positions.push((px, py));
    let bound = max_dev as i32;
    for _ in 1..frames {
        loop {
            let mut dx: i32 = rng.random_range(-3..=3);
            let mut dy: i32 = rng.random_range(-3..=3);
            if dx == 0 && dy == 0 {
                continue;
            }
            if (px + dx - margin as i32).abs() > bound {
                dx = -dx;
            }
            if (py + dy - margin as i32).abs() > bound {
                dy = -dy;
            }
            px += dx;
            py += dy;
            break;
        }
        positions.push((px, py));
    }

    let mut out_frames = Vec::with_capacity(frames);
    for (idx, &(ox, oy)) in positions.iter().enumerate() {
        if ox < 0 || oy < 0 || ox as usize + width > cw || oy as usize + height > ch {
            return Err(Error::InvalidArgument(format!(
                "crop at ({ox},{oy}) exceeds the {cw}x{ch} canvas"
            )));
        }
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            let row = (oy as usize + y) * cw + ox as usize;
            pixels.extend_from_slice(&canvas[row..row + width]);
        }
        out_frames.push(ImageFrame::new(
            width,
            height,
            pixels,
            FrameMeta {
                scene_id,
                frame_idx: idx as u32,
                condition_id: None,
            },
        )?);
    }
    Ok(Scene {
        scene_id,
        frames: out_frames,
        offsets: positions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

/// One image record of the dataset manifest (JSON-lines, one per image).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub scene_id: u32,
    pub frame_idx: u32,
    pub condition_id: u32,
    pub path: String,
    pub gamma: f64,
    pub contrast: f64,
    pub is_reference: bool,
    pub split: Split,
    pub sha256: String,
}

/// Sidecar metadata written next to the records file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub scenes: usize,
    pub frames_per_scene: usize,
    pub split_ratio: f64,
    pub grid: Vec<ConditionSpec>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub meta: ManifestMeta,
    /// Directory that record paths are relative to.
    pub root: PathBuf,
}

pub struct PairSample<'a> {
    pub variant: &'a ManifestRecord,
    pub reference: &'a ManifestRecord,
}

pub struct TripletSample<'a> {
    pub y1: &'a ManifestRecord,
    pub y2: &'a ManifestRecord,
    pub reference: &'a ManifestRecord,
}

/// Two consecutive poses under drifting conditions plus their
/// identity-condition references (which therefore share one brightness).
pub struct TemporalSample<'a> {
    pub x: [&'a ManifestRecord; 2],
    pub refs: [&'a ManifestRecord; 2],
}

impl DatasetManifest {
    pub fn records_path(dir: &Path) -> PathBuf {
        dir.join("manifest.jsonl")
    }

    pub fn meta_path(dir: &Path) -> PathBuf {
        dir.join("manifest.meta.json")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let rec_path = Self::records_path(dir);
        let mut buf = Vec::new();
        for rec in &self.records {
            serde_json::to_writer(&mut buf, rec)
                .map_err(|e| Error::Format(format!("manifest record: {e}")))?;
            buf.push(b'\n');
        }
        fs::write(&rec_path, buf).map_err(|e| Error::io(&rec_path, e))?;
        let meta_path = Self::meta_path(dir);
        let meta = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| Error::Format(format!("manifest meta: {e}")))?;
        fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;
        Ok(())
    }

    /// Load a manifest given either the dataset directory or the records
    /// file path.
    pub fn load(path: &Path) -> Result<Self> {
        let dir = if path.is_dir() {
            path.to_path_buf()
        } else {
            path.parent()
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("{} has no parent", path.display()))
                })?
                .to_path_buf()
        };
        let rec_path = Self::records_path(&dir);
        let text = fs::read_to_string(&rec_path).map_err(|e| Error::io(&rec_path, e))?;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("manifest line {}: {e}", lineno + 1)))?;
            records.push(rec);
        }
        let meta_path = Self::meta_path(&dir);
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ManifestMeta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::Format(format!("manifest meta: {e}")))?;
        Ok(DatasetManifest {
            records,
            meta,
            root: dir,
        })
    }

    pub fn load_frame(&self, rec: &ManifestRecord) -> Result<ImageFrame> {
        let mut frame = ImageFrame::load_png(&self.root.join(&rec.path))?;
        frame.meta = FrameMeta {
            scene_id: rec.scene_id,
            frame_idx: rec.frame_idx,
            condition_id: Some(rec.condition_id),
        };
        Ok(frame)
    }

    fn by_pose(&self, split: Split) -> BTreeMap<(u32, u32), Vec<&ManifestRecord>> {
        let mut map: BTreeMap<(u32, u32), Vec<&ManifestRecord>> = BTreeMap::new();
        for rec in self.records.iter().filter(|r| r.split == split) {
            map.entry((rec.scene_id, rec.frame_idx))
                .or_default()
                .push(rec);
        }
        for recs in map.values_mut() {
            recs.sort_by_key(|r| r.condition_id);
        }
        map
    }

    /// (variant, reference) pairs: every non-reference-condition variant
    /// of a pose against that pose's reference.
    pub fn pairs(&self, split: Split) -> Result<Vec<PairSample<'_>>> {
        let mut out = Vec::new();
        for ((scene, frame), recs) in self.by_pose(split) {
            let reference = *recs.iter().find(|r| r.is_reference).ok_or_else(|| {
                Error::Format(format!(
                    "manifest has no reference record for scene {scene} frame {frame}"
                ))
            })?;
            for rec in recs {
                if rec.condition_id != reference.condition_id {
                    out.push(PairSample {
                        variant: rec,
                        reference,
                    });
                }
            }
        }
        Ok(out)
    }

    /// (y1, y2, reference) triplets per pose: the non-reference variants
    /// sorted by condition id and chunked into consecutive disjoint
    /// pairs, five triplets per pose on a 12-condition grid.
    pub fn triplets(&self, split: Split) -> Result<Vec<TripletSample<'_>>> {
        let mut out = Vec::new();
        for ((scene, frame), recs) in self.by_pose(split) {
            let reference = *recs.iter().find(|r| r.is_reference).ok_or_else(|| {
                Error::Format(format!(
                    "manifest has no reference record for scene {scene} frame {frame}"
                ))
            })?;
            let others: Vec<&ManifestRecord> = recs
                .into_iter()
                .filter(|r| r.condition_id != reference.condition_id)
                .collect();
            for chunk in others.chunks_exact(2) {
                out.push(TripletSample {
                    y1: chunk[0],
                    y2: chunk[1],
                    reference,
                });
            }
        }
        Ok(out)
    }

    /// Temporal quadruples: consecutive poses (t, t+1) of one scene with
    /// the variant condition advancing by one grid slot between frames
    /// (a flicker), plus the identity-condition references of both poses.
    pub fn temporal(&self, split: Split) -> Result<Vec<TemporalSample<'_>>> {
        let identity_id = self
            .meta
            .grid
            .iter()
            .find(|c| c.is_identity())
            .map(|c| c.condition_id)
            .ok_or_else(|| Error::Format("grid lacks an identity condition".into()))?;
        let poses = self.by_pose(split);
        let n_cond = self.meta.grid.len() as u32;
        let mut out = Vec::new();
        fn find_cond<'a>(recs: &[&'a ManifestRecord], cond: u32) -> Option<&'a ManifestRecord> {
            recs.iter().find(|r| r.condition_id == cond).copied()
        }
        for (&(scene, frame), recs) in &poses {
            let Some(next) = poses.get(&(scene, frame + 1)) else {
                continue;
            };
            let (Some(ref_a), Some(ref_b)) =
                (find_cond(recs, identity_id), find_cond(next, identity_id))
            else {
                continue;
            };
            for cond in 0..n_cond {
                let next_cond = (cond + 1) % n_cond;
                let (Some(a), Some(b)) = (find_cond(recs, cond), find_cond(next, next_cond))
                else {
                    continue;
                };
                out.push(TemporalSample {
                    x: [a, b],
                    refs: [ref_a, ref_b],
                });
            }
        }
        Ok(out)
    }

    /// Count of records per condition id.
    pub fn condition_histogram(&self) -> BTreeMap<u32, usize> {
        let mut hist = BTreeMap::new();
        for rec in &self.records {
            *hist.entry(rec.condition_id).or_insert(0) += 1;
        }
        hist
    }
}

/// Generate, condition, select references, write images and manifest.
pub fn build_dataset(
    scenes: &[Scene],
    grid: &[ConditionSpec],
    split_ratio: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    validate_grid(grid)?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("build_dataset: no scenes".into()));
    }
    if !(0.0..=1.0).contains(&split_ratio) {
        return Err(Error::InvalidArgument(format!(
            "split ratio must lie in [0,1], got {split_ratio}"
        )));
    }
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    // Whole scenes go to one split so triplets and temporal sequences
    // never straddle the train/holdout boundary.
    let n_holdout = if scenes.len() >= 2 {
        (((1.0 - split_ratio) * scenes.len() as f64).round() as usize).clamp(1, scenes.len() - 1)
    } else {
        0
    };
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = pcg_salted(seed, 0x5011f);
        order.shuffle(&mut rng);
    }
    let holdout_scenes: std::collections::BTreeSet<usize> =
        order[..n_holdout].iter().copied().collect();

    struct PoseJob<'a> {
        scene_idx: usize,
        frame_idx: usize,
        frame: &'a ImageFrame,
    }
    let mut jobs = Vec::new();
    for (scene_idx, scene) in scenes.iter().enumerate() {
        for (frame_idx, frame) in scene.frames.iter().enumerate() {
            jobs.push(PoseJob {
                scene_idx,
                frame_idx,
                frame,
            });
        }
    }

    // Condition application and reference selection are independent per
    // pose.
    let pose_results: Vec<Result<Vec<(ImageFrame, u32, bool)>>> = parallel_map(&jobs, |job| {
        let mut variants = Vec::with_capacity(grid.len());
        for spec in grid {
            variants.push(apply_condition(job.frame, spec)?.quantized());
        }
        let ref_idx = select_reference(&variants)?;
        Ok(variants
            .into_iter()
            .enumerate()
            .map(|(i, v)| (v, grid[i].condition_id, i == ref_idx))
            .collect())
    });

    let mut records = Vec::new();
    for (job, result) in jobs.iter().zip(pose_results) {
        let variants = result?;
        let scene = &scenes[job.scene_idx];
        let split = if holdout_scenes.contains(&job.scene_idx) {
            Split::Holdout
        } else {
            Split::Train
        };
        let scene_dir = img_dir.join(format!("scene{:03}", scene.scene_id));
        fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
        for ((variant, condition_id, is_reference), spec) in variants.into_iter().zip(grid) {
            let rel = format!(
                "images/scene{:03}/frame{:03}_cond{:02}.png",
                scene.scene_id, job.frame_idx, condition_id
            );
            let abs = out_dir.join(&rel);
            variant.save_png(&abs)?;
            let bytes = fs::read(&abs).map_err(|e| Error::io(&abs, e))?;
            let sha256 = sha256_hex(&bytes);
            records.push(ManifestRecord {
                scene_id: scene.scene_id,
                frame_idx: job.frame_idx as u32,
                condition_id,
                path: rel,
                gamma: spec.gamma,
                contrast: spec.contrast,
                is_reference,
                split,
                sha256,
            });
        }
    }

    let manifest = DatasetManifest {
        records,
        meta: ManifestMeta {
            seed,
            width: scenes[0].frames[0].width,
            height: scenes[0].frames[0].height,
            scenes: scenes.len(),
            frames_per_scene: scenes[0].frames.len(),
            split_ratio,
            grid: grid.to_vec(),
        },
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir)?;
    Ok(manifest)
}

/// Convenience: generate `scenes` scenes and build the dataset in one go.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    seed: u64,
    scenes: usize,
    frames: usize,
    width: usize,
    height: usize,
    grid: &[ConditionSpec],
    split_ratio: f64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    let scene_ids: Vec<u32> = (0..scenes as u32).collect();
    let generated: Vec<Result<Scene>> =
        parallel_map(&scene_ids, |&id| generate_scene(seed, id, frames, width, height));
    let mut all = Vec::with_capacity(scenes);
    for s in generated {
        all.push(s?);
    }
    build_dataset(&all, grid, split_ratio, seed, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_is_valid() {
        let grid = default_grid();
        validate_grid(&grid).unwrap();
        assert_eq!(grid.len(), 12);
        assert_eq!(grid.iter().filter(|c| c.is_identity()).count(), 1);
    }

    #[test]
    fn apply_identity_is_identity() {
        let frame =
            ImageFrame::new(2, 2, vec![0.1, 0.5, 0.9, 0.3], FrameMeta::default()).unwrap();
        let spec = ConditionSpec {
            condition_id: 7,
            gamma: 1.0,
            contrast: 1.0,
        };
        let out = apply_condition(&frame, &spec).unwrap();
        assert_eq!(out.pixels, frame.pixels);
        assert_eq!(out.meta.condition_id, Some(7));
    }

    #[test]
    fn apply_gamma_half_on_quarter() {
        let frame = ImageFrame::constant(2, 2, 0.25).unwrap();
        let spec = ConditionSpec {
            condition_id: 0,
            gamma: 0.5,
            contrast: 1.0,
        };
        let out = apply_condition(&frame, &spec).unwrap();
        assert!((out.pixels[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn apply_contrast_clamps() {
        let frame = ImageFrame::constant(2, 2, 0.75).unwrap();
        let spec = ConditionSpec {
            condition_id: 0,
            gamma: 1.0,
            contrast: 2.0,
        };
        let out = apply_condition(&frame, &spec).unwrap();
        assert_eq!(out.pixels[0], 1.0);
        // 0.75 maps exactly onto the bound; 0.8 overshoots and clips.
        assert!(!condition_clips(&frame, &spec));
        let brighter = ImageFrame::constant(2, 2, 0.8).unwrap();
        assert!(condition_clips(&brighter, &spec));
    }

    #[test]
    fn apply_rejects_non_positive() {
        let frame = ImageFrame::constant(2, 2, 0.5).unwrap();
        for (gamma, contrast) in [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)] {
            let spec = ConditionSpec {
                condition_id: 0,
                gamma,
                contrast,
            };
            assert!(apply_condition(&frame, &spec).is_err());
        }
    }

    #[test]
    fn select_reference_prefers_texture() {
        let flat = ImageFrame::constant(2, 2, 0.5).unwrap();
        let striped =
            ImageFrame::new(2, 2, vec![0.0, 1.0, 0.0, 1.0], FrameMeta::default()).unwrap();
        assert_eq!(
            select_reference(&[flat.clone(), striped.clone()]).unwrap(),
            1
        );
        assert_eq!(select_reference(&[striped, flat]).unwrap(), 0);
    }

    #[test]
    fn select_reference_single_and_ties() {
        let one = ImageFrame::constant(2, 2, 0.5).unwrap();
        assert_eq!(select_reference(std::slice::from_ref(&one)).unwrap(), 0);

        let mk = |cond| {
            let mut f = ImageFrame::constant(2, 2, 0.5).unwrap();
            f.meta.condition_id = Some(cond);
            f
        };
        // All identical: the lowest condition id wins.
        assert_eq!(select_reference(&[mk(5), mk(2), mk(9)]).unwrap(), 1);
        assert!(select_reference(&[]).is_err());
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let a = generate_scene(42, 0, 3, 32, 24).unwrap();
        let b = generate_scene(42, 0, 3, 32, 24).unwrap();
        assert_eq!(a.offsets, b.offsets);
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.pixels, fb.pixels);
        }
        let c = generate_scene(43, 0, 3, 32, 24).unwrap();
        assert_ne!(a.frames[0].pixels, c.frames[0].pixels);
    }

    #[test]
    fn single_frame_scene_has_zero_offset() {
        let s = generate_scene(1, 0, 1, 16, 16).unwrap();
        assert_eq!(s.frames.len(), 1);
        assert_eq!(s.offsets.len(), 1);
        assert_eq!(s.frames[0].meta.frame_idx, 0);
    }

    #[test]
    fn consecutive_frames_are_pure_translations() {
        let s = generate_scene(7, 0, 4, 32, 24).unwrap();
        for t in 0..3 {
            let (x0, y0) = s.offsets[t];
            let (x1, y1) = s.offsets[t + 1];
            let (dx, dy) = (x1 - x0, y1 - y0);
            let a = &s.frames[t];
            let b = &s.frames[t + 1];
            // b(x, y) == a(x + dx, y + dy) on the overlap.
            for y in 0..24i32 {
                for x in 0..32i32 {
                    let (ax, ay) = (x + dx, y + dy);
                    if (0..32).contains(&ax) && (0..24).contains(&ay) {
                        assert_eq!(
                            a.at(ax as usize, ay as usize),
                            b.at(x as usize, y as usize),
                            "mismatch at t={t} ({x},{y})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(generate_scene(1, 0, 2, 100, 100).is_err());
        assert!(generate_scene(1, 0, 0, 64, 48).is_err());
    }

    #[test]
    fn dataset_counts_and_uniform_histogram() {
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            generate_dataset(11, 2, 2, 16, 16, &default_grid(), 0.5, dir.path()).unwrap();
        // 2 scenes x 2 frames x 12 conditions.
        assert_eq!(manifest.records.len(), 48);
        let refs = manifest.records.iter().filter(|r| r.is_reference).count();
        assert_eq!(refs, 4);
        let hist = manifest.condition_histogram();
        assert_eq!(hist.len(), 12);
        assert!(hist.values().all(|&c| c == 4));
    }

    #[test]
    fn pair_sampler_excludes_reference_condition() {
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            generate_dataset(11, 2, 2, 16, 16, &default_grid(), 0.5, dir.path()).unwrap();
        for split in [Split::Train, Split::Holdout] {
            for pair in manifest.pairs(split).unwrap() {
                assert_ne!(pair.variant.condition_id, pair.reference.condition_id);
                assert!(pair.reference.is_reference);
            }
        }
    }

    #[test]
    fn temporal_refs_share_identity_condition() {
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            generate_dataset(13, 2, 3, 16, 16, &default_grid(), 0.5, dir.path()).unwrap();
        let identity = manifest
            .meta
            .grid
            .iter()
            .find(|c| c.is_identity())
            .unwrap()
            .condition_id;
        let quads = manifest.temporal(Split::Train).unwrap();
        assert!(!quads.is_empty());
        for q in &quads {
            assert_eq!(q.refs[0].condition_id, identity);
            assert_eq!(q.refs[1].condition_id, identity);
            assert_eq!(q.x[0].frame_idx + 1, q.x[1].frame_idx);
            assert_ne!(q.x[0].condition_id, q.x[1].condition_id);
        }
    }

    #[test]
    fn manifest_roundtrip_and_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            generate_dataset(17, 2, 2, 16, 16, &default_grid(), 0.5, dir.path()).unwrap();
        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(loaded.records.len(), manifest.records.len());
        for rec in &loaded.records {
            let frame = loaded.load_frame(rec).unwrap();
            assert_eq!(frame.width, loaded.meta.width);
            assert_eq!(frame.height, loaded.meta.height);
            let bytes = std::fs::read(loaded.root.join(&rec.path)).unwrap();
            assert_eq!(sha256_hex(&bytes), rec.sha256);
        }
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_dataset(23, 2, 2, 16, 16, &default_grid(), 0.5, d1.path()).unwrap();
        generate_dataset(23, 2, 2, 16, 16, &default_grid(), 0.5, d2.path()).unwrap();
        let m1 = std::fs::read(DatasetManifest::records_path(d1.path())).unwrap();
        let m2 = std::fs::read(DatasetManifest::records_path(d2.path())).unwrap();
        assert_eq!(m1, m2);
        let r1 = DatasetManifest::load(d1.path()).unwrap();
        for rec in &r1.records {
            let b1 = std::fs::read(d1.path().join(&rec.path)).unwrap();
            let b2 = std::fs::read(d2.path().join(&rec.path)).unwrap();
            assert_eq!(b1, b2, "image bytes differ for {}", rec.path);
        }
    }
}
