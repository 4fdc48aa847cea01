//! Single-channel intensity images in [0,1] with provenance metadata.
//!
//! Frames are stored on disk as 8-bit grayscale PNG; quantization is
//! round-half-away-from-zero to the 0..=255 level grid, the one rounding
//! rule used everywhere in this crate.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrameMeta {
    pub scene_id: u32,
    pub frame_idx: u32,
    pub condition_id: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFrame {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in [0,1].
    pub pixels: Vec<f64>,
    pub meta: FrameMeta,
}

impl ImageFrame {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>, meta: FrameMeta) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "frame buffer of {} pixels does not match {width}x{height}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "frame intensities must lie in [0,1]".into(),
            ));
        }
        Ok(ImageFrame {
            width,
            height,
            pixels,
            meta,
        })
    }

    pub fn constant(width: usize, height: usize, v: f64) -> Result<Self> {
        ImageFrame::new(width, height, vec![v; width * height], FrameMeta::default())
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    /// 8-bit levels: round(v*255), half away from zero.
    pub fn levels(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Snap intensities onto the 8-bit grid the PNG encoder will use, so
    /// in-memory values match the file contents exactly.
    pub fn quantized(&self) -> ImageFrame {
        let pixels = self
            .levels()
            .into_iter()
            .map(|l| l as f64 / 255.0)
            .collect();
        ImageFrame {
            width: self.width,
            height: self.height,
            pixels,
            meta: self.meta,
        }
    }

    pub fn from_levels(width: usize, height: usize, levels: &[u8], meta: FrameMeta) -> Result<Self> {
        let pixels = levels.iter().map(|&l| l as f64 / 255.0).collect();
        ImageFrame::new(width, height, pixels, meta)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = GrayImage::new(self.width as u32, self.height as u32);
        for (i, l) in self.levels().into_iter().enumerate() {
            let (x, y) = ((i % self.width) as u32, (i / self.width) as u32);
            img.put_pixel(x, y, Luma([l]));
        }
        img.save(path)
            .map_err(|e| Error::Format(format!("writing {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
        let img = reader
            .decode()
            .map_err(|e| Error::Format(format!("decoding {}: {e}", path.display())))?
            .into_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        ImageFrame::from_levels(w, h, img.as_raw(), FrameMeta::default())
    }

    /// Bind as a graph constant shaped `[1,1,H,W]`.
    pub fn to_tensor<'g, T: Scalar>(&self, graph: &'g Graph<T>) -> Result<Tensor<'g, T>> {
        let data = self.pixels.iter().map(|&v| T::from_f64(v)).collect();
        graph.constant(data, &[1, 1, self.height, self.width])
    }

    /// Rebuild a frame from a `[1,1,H,W]` (or `[H,W]`) tensor value,
    /// clamping stray numerical noise back into [0,1].
    pub fn from_tensor<T: Scalar>(tensor: &Tensor<'_, T>, meta: FrameMeta) -> Result<Self> {
        let shape = tensor.shape();
        let (h, w) = match shape.as_slice() {
            [1, 1, h, w] => (*h, *w),
            [h, w] => (*h, *w),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "tensor shape {shape:?} is not a single-channel image"
                )))
            }
        };
        let pixels = tensor
            .value()
            .iter()
            .map(|v| v.to_f64().clamp(0.0, 1.0))
            .collect();
        ImageFrame::new(w, h, pixels, meta)
    }
}
