//! Classical comparison methods: min-max normalization, global
//! histogram equalization and contrast-limited adaptive histogram
//! equalization on a tile grid with bilinear mapping interpolation.
//!
//! All rounding is round-half-away-from-zero (`f64::round`), the same
//! rule image quantization uses.

use crate::error::{Error, Result};
use crate::frame::ImageFrame;

pub const LEVELS: usize = 256;

/// Min-max stretch onto [0,1]; a constant image maps to 0.5 everywhere.
pub fn normalize(frame: &ImageFrame) -> ImageFrame {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in &frame.pixels {
        min = min.min(v);
        max = max.max(v);
    }
    let pixels = if max > min {
        let d = max - min;
        frame.pixels.iter().map(|&v| (v - min) / d).collect()
    } else {
        vec![0.5; frame.pixels.len()]
    };
    ImageFrame {
        width: frame.width,
        height: frame.height,
        pixels,
        meta: frame.meta,
    }
}

/// Equalization mapping for one histogram:
/// v -> round((cdf(v) - cdf_min) / (1 - cdf_min) * (levels-1)).
/// A constant image (cdf_min = 1) maps to itself.
fn equalization_lut(hist: &[f64; LEVELS], total: f64) -> [u8; LEVELS] {
    let mut lut = [0u8; LEVELS];
    let mut cdf_min = 0.0;
    for (v, &count) in hist.iter().enumerate() {
        if count > 0.0 {
            cdf_min = count / total;
            let _ = v;
            break;
        }
    }
    if cdf_min >= 1.0 {
        // Degenerate single-level histogram: identity mapping.
        for (v, out) in lut.iter_mut().enumerate() {
            *out = v as u8;
        }
        return lut;
    }
    let scale = (LEVELS - 1) as f64 / (1.0 - cdf_min);
    let mut cdf = 0.0;
    for (v, out) in lut.iter_mut().enumerate() {
        cdf += hist[v] / total;
        let mapped = ((cdf - cdf_min) * scale).round();
        *out = mapped.clamp(0.0, (LEVELS - 1) as f64) as u8;
    }
    lut
}

/// Global histogram equalization over 256 levels; the mapping is
/// monotone non-decreasing and leaves constant images unchanged.
pub fn global_he(frame: &ImageFrame) -> ImageFrame {
    let levels = frame.levels();
    let mut hist = [0.0f64; LEVELS];
    for &l in &levels {
        hist[l as usize] += 1.0;
    }
    let lut = equalization_lut(&hist, levels.len() as f64);
    let pixels = levels
        .iter()
        .map(|&l| lut[l as usize] as f64 / (LEVELS - 1) as f64)
        .collect();
    ImageFrame {
        width: frame.width,
        height: frame.height,
        pixels,
        meta: frame.meta,
    }
}

/// Contrast-limited adaptive histogram equalization.
///
/// Per-tile histograms are clipped at `clip_limit` times the mean bin
/// count (the excess redistributed uniformly), equalized with the same
/// mapping as [`global_he`], and pixel mappings are interpolated
/// bilinearly between tile centers. With a single tile and an inactive
/// clip limit this is bit-identical to [`global_he`].
pub fn adaptive_he(frame: &ImageFrame, tiles: (usize, usize), clip_limit: f64) -> Result<ImageFrame> {
    let (tiles_x, tiles_y) = tiles;
    if tiles_x == 0 || tiles_y == 0 {
        return Err(Error::InvalidArgument("tile grid must be positive".into()));
    }
    if tiles_x > frame.width || tiles_y > frame.height {
        return Err(Error::InvalidArgument(format!(
            "tile grid {tiles_x}x{tiles_y} exceeds image {}x{}",
            frame.width, frame.height
        )));
    }
    if !(clip_limit > 0.0) {
        return Err(Error::InvalidArgument("clip limit must be positive".into()));
    }
    let levels = frame.levels();
    let (w, h) = (frame.width, frame.height);

    // Tile boundaries cover the image exactly even when dims do not
    // divide evenly.
    let bound = |i: usize, n: usize, total: usize| (i * total) / n;
    let mut luts = vec![[0u8; LEVELS]; tiles_x * tiles_y];
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let (x0, x1) = (bound(tx, tiles_x, w), bound(tx + 1, tiles_x, w));
            let (y0, y1) = (bound(ty, tiles_y, h), bound(ty + 1, tiles_y, h));
            let mut hist = [0.0f64; LEVELS];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[levels[y * w + x] as usize] += 1.0;
                }
            }
            let area = ((x1 - x0) * (y1 - y0)) as f64;
            // A single-level tile stays an identity mapping; clipping
            // would otherwise smear its histogram before the degenerate
            // rule could apply.
            if hist.iter().filter(|&&c| c > 0.0).count() > 1 {
                clip_histogram(&mut hist, area, clip_limit);
            }
            luts[ty * tiles_x + tx] = equalization_lut(&hist, area);
        }
    }

    let mut out_levels = vec![0u8; levels.len()];
    for y in 0..h {
        for x in 0..w {
            let l = levels[y * w + x] as usize;
            out_levels[y * w + x] =
                interpolate_tiles(&luts, tiles_x, tiles_y, w, h, x, y, l);
        }
    }
    ImageFrame::from_levels(w, h, &out_levels, frame.meta)
}

fn clip_histogram(hist: &mut [f64; LEVELS], area: f64, clip_limit: f64) {
    let limit = clip_limit * area / LEVELS as f64;
    let mut excess = 0.0;
    for bin in hist.iter_mut() {
        if *bin > limit {
            excess += *bin - limit;
            *bin = limit;
        }
    }
    if excess > 0.0 {
        let share = excess / LEVELS as f64;
        for bin in hist.iter_mut() {
            *bin += share;
        }
    }
}

/// Bilinear interpolation between the mappings of the four neighboring
/// tiles (clamped at the image border). A single-tile grid uses its one
/// mapping directly so no interpolation arithmetic is involved.
#[allow(clippy::too_many_arguments)]
fn interpolate_tiles(
    luts: &[[u8; LEVELS]],
    tiles_x: usize,
    tiles_y: usize,
    w: usize,
    h: usize,
    x: usize,
    y: usize,
    level: usize,
) -> u8 {
    if tiles_x == 1 && tiles_y == 1 {
        return luts[0][level];
    }
    let pos = |i: usize, n: usize, total: usize| -> f64 {
        // Tile center in pixel coordinates.
        ((i * total) / n + ((i + 1) * total) / n) as f64 / 2.0
    };
    let locate = |coord: usize, n: usize, total: usize| -> (usize, usize, f64) {
        let c = coord as f64;
        if n == 1 {
            return (0, 0, 0.0);
        }
        if c <= pos(0, n, total) {
            return (0, 0, 0.0);
        }
        if c >= pos(n - 1, n, total) {
            return (n - 1, n - 1, 0.0);
        }
        let mut lo = 0;
        while lo + 1 < n && pos(lo + 1, n, total) < c {
            lo += 1;
        }
        let p0 = pos(lo, n, total);
        let p1 = pos(lo + 1, n, total);
        ((lo), (lo + 1), (c - p0) / (p1 - p0))
    };
    let (tx0, tx1, fx) = locate(x, tiles_x, w);
    let (ty0, ty1, fy) = locate(y, tiles_y, h);
    let l00 = luts[ty0 * tiles_x + tx0][level] as f64;
    let l01 = luts[ty0 * tiles_x + tx1][level] as f64;
    let l10 = luts[ty1 * tiles_x + tx0][level] as f64;
    let l11 = luts[ty1 * tiles_x + tx1][level] as f64;
    let top = l00 * (1.0 - fx) + l01 * fx;
    let bottom = l10 * (1.0 - fx) + l11 * fx;
    let v = top * (1.0 - fy) + bottom * fy;
    v.round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::FrameMeta;
    use rand::RngExt;

    #[test]
    fn normalize_stretches_range() {
        let f = ImageFrame::new(2, 1, vec![0.2, 0.6], FrameMeta::default()).unwrap();
        let out = normalize(&f);
        assert_eq!(out.pixels, vec![0.0, 1.0]);
    }

    #[test]
    fn normalize_full_range_unchanged() {
        let f = ImageFrame::new(2, 2, vec![0.0, 0.25, 0.75, 1.0], FrameMeta::default()).unwrap();
        assert_eq!(normalize(&f).pixels, f.pixels);
    }

    #[test]
    fn normalize_constant_maps_to_half() {
        let f = ImageFrame::constant(3, 3, 0.7).unwrap();
        assert_eq!(normalize(&f).pixels, vec![0.5; 9]);
    }

    #[test]
    fn global_he_four_pixel_example() {
        // Levels {0, 0, 128, 255}: cdf_min = 0.5, so 0 -> 0,
        // 128 -> round(0.25/0.5*255) = 128, 255 -> 255.
        let f = ImageFrame::from_levels(2, 2, &[0, 0, 128, 255], FrameMeta::default()).unwrap();
        let out = global_he(&f);
        assert_eq!(out.levels(), vec![0, 0, 128, 255]);
    }

    #[test]
    fn global_he_constant_unchanged() {
        let f = ImageFrame::constant(4, 4, 0.3).unwrap();
        let out = global_he(&f);
        assert_eq!(out.levels(), f.levels());
    }

    #[test]
    fn global_he_full_ramp_is_fixed_point() {
        let levels: Vec<u8> = (0..=255).collect();
        let f = ImageFrame::from_levels(16, 16, &levels, FrameMeta::default()).unwrap();
        let out = global_he(&f);
        assert_eq!(out.levels(), levels);
    }

    #[test]
    fn global_he_mapping_is_monotone() {
        let mut rng = crate::rng::pcg_salted(5, 1);
        for _ in 0..20 {
            let levels: Vec<u8> = (0..256).map(|_| rng.random_range(0..=255u32) as u8).collect();
            let f = ImageFrame::from_levels(16, 16, &levels, FrameMeta::default()).unwrap();
            let out = out_lut(&f);
            for v in 1..LEVELS {
                assert!(out[v] >= out[v - 1], "mapping not monotone at {v}");
            }
        }
    }

    // Recover the effective global mapping by equalizing a probe image.
    fn out_lut(f: &ImageFrame) -> [u8; LEVELS] {
        let levels = f.levels();
        let mut hist = [0.0f64; LEVELS];
        for &l in &levels {
            hist[l as usize] += 1.0;
        }
        equalization_lut(&hist, levels.len() as f64)
    }

    #[test]
    fn adaptive_single_tile_inactive_clip_equals_global() {
        let mut rng = crate::rng::pcg_salted(6, 2);
        let levels: Vec<u8> = (0..64 * 64).map(|_| rng.random_range(0..=255u32) as u8).collect();
        let f = ImageFrame::from_levels(64, 64, &levels, FrameMeta::default()).unwrap();
        let ahe = adaptive_he(&f, (1, 1), LEVELS as f64).unwrap();
        let ghe = global_he(&f);
        assert_eq!(ahe.levels(), ghe.levels());
        assert_eq!(ahe.pixels, ghe.pixels);
    }

    #[test]
    fn adaptive_constant_unchanged() {
        let f = ImageFrame::constant(32, 32, 0.42).unwrap();
        let out = adaptive_he(&f, (4, 4), 2.0).unwrap();
        assert_eq!(out.levels(), f.levels());
    }

    #[test]
    fn adaptive_rejects_oversized_grid() {
        let f = ImageFrame::constant(8, 8, 0.5).unwrap();
        assert!(adaptive_he(&f, (16, 16), 2.0).is_err());
    }

    #[test]
    fn adaptive_matches_naive_oracle() {
        // Independent oracle: recompute tile mappings and interpolation
        // per pixel, straight from the definitions.
        let mut rng = crate::rng::pcg_salted(7, 3);
        let levels: Vec<u8> = (0..64 * 64).map(|_| rng.random_range(0..=255u32) as u8).collect();
        let f = ImageFrame::from_levels(64, 64, &levels, FrameMeta::default()).unwrap();
        let (tiles_x, tiles_y) = (2usize, 2usize);
        let clip = 2.0;
        let got = adaptive_he(&f, (tiles_x, tiles_y), clip).unwrap();

        let (w, h) = (64usize, 64usize);
        let bound = |i: usize, n: usize, total: usize| (i * total) / n;
        let mut luts = Vec::new();
        for ty in 0..tiles_y {
            for tx in 0..tiles_x {
                let (x0, x1) = (bound(tx, tiles_x, w), bound(tx + 1, tiles_x, w));
                let (y0, y1) = (bound(ty, tiles_y, h), bound(ty + 1, tiles_y, h));
                let mut hist = [0.0f64; LEVELS];
                for y in y0..y1 {
                    for x in x0..x1 {
                        hist[levels[y * w + x] as usize] += 1.0;
                    }
                }
                let area = ((x1 - x0) * (y1 - y0)) as f64;
                let limit = clip * area / LEVELS as f64;
                let mut excess = 0.0;
                for bin in hist.iter_mut() {
                    if *bin > limit {
                        excess += *bin - limit;
                        *bin = limit;
                    }
                }
                for bin in hist.iter_mut() {
                    *bin += excess / LEVELS as f64;
                }
                luts.push(equalization_lut(&hist, area));
            }
        }
        let centers_x: Vec<f64> = (0..tiles_x)
            .map(|i| (bound(i, tiles_x, w) + bound(i + 1, tiles_x, w)) as f64 / 2.0)
            .collect();
        let centers_y: Vec<f64> = (0..tiles_y)
            .map(|i| (bound(i, tiles_y, h) + bound(i + 1, tiles_y, h)) as f64 / 2.0)
            .collect();
        for y in 0..h {
            for x in 0..w {
                let l = levels[y * w + x] as usize;
                let fx = ((x as f64 - centers_x[0]) / (centers_x[1] - centers_x[0])).clamp(0.0, 1.0);
                let fy = ((y as f64 - centers_y[0]) / (centers_y[1] - centers_y[0])).clamp(0.0, 1.0);
                let l00 = luts[0][l] as f64;
                let l01 = luts[1][l] as f64;
                let l10 = luts[2][l] as f64;
                let l11 = luts[3][l] as f64;
                let expect = l00 * (1.0 - fx) * (1.0 - fy)
                    + l01 * fx * (1.0 - fy)
                    + l10 * (1.0 - fx) * fy
                    + l11 * fx * fy;
                let got_l = got.levels()[y * w + x] as f64;
                assert!(
                    (got_l - expect).abs() <= 1.0,
                    "pixel ({x},{y}): got {got_l}, oracle {expect}"
                );
            }
        }
    }

    #[test]
    fn baselines_preserve_range_and_shape() {
        let mut rng = crate::rng::pcg_salted(8, 4);
        let pixels: Vec<f64> = (0..32 * 16).map(|_| rng.random_range(0.0..=1.0)).collect();
        let f = ImageFrame::new(32, 16, pixels, FrameMeta::default()).unwrap();
        for out in [
            normalize(&f),
            global_he(&f),
            adaptive_he(&f, (4, 4), 2.0).unwrap(),
        ] {
            assert_eq!((out.width, out.height), (32, 16));
            assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
