//! The three training objectives: gradient information, logarithmic RMSE
//! and SSIM (with a no-structure variant), each available both as a
//! differentiable tensor op and as a plain function over image frames.
//!
//! Gradients use central differences with a replicate border. The
//! quantized gradient-information variant works on the 8-bit level grid
//! in exact integer arithmetic; the evaluator builds its gain ratios
//! from it.

use crate::error::{Error, Result};
use crate::frame::ImageFrame;
use crate::scalar::Scalar;
use crate::tensor::{Graph, OpKernel, ParentView, Tensor};

/// Offset inside the logarithms of the LogRMSE objective, on the [0,1]
/// intensity scale.
pub const LOG_EPS: f64 = 1e-6;

/// SSIM configuration. Defaults follow the usual convention: 11x11
/// Gaussian window with sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub dynamic_range: f64,
    pub k1: f64,
    pub k2: f64,
    pub include_structure: bool,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            dynamic_range: 1.0,
            k1: 0.01,
            k2: 0.03,
            include_structure: true,
        }
    }
}

impl SsimConfig {
    /// The stage-3 variant: luminance and contrast factors only.
    pub fn without_structure() -> Self {
        SsimConfig {
            include_structure: false,
            ..SsimConfig::default()
        }
    }

    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    pub fn c3(&self) -> f64 {
        self.c2() / 2.0
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "ssim window must be odd and positive, got {}",
                self.window
            )));
        }
        if self.sigma <= 0.0 || self.dynamic_range <= 0.0 || self.k1 <= 0.0 || self.k2 <= 0.0 {
            return Err(Error::InvalidArgument(
                "ssim constants must be strictly positive".into(),
            ));
        }
        Ok(())
    }

    /// Normalized 2-D Gaussian window, row-major `window x window`.
    pub fn gaussian_window(&self) -> Vec<f64> {
        let n = self.window;
        let c = (n / 2) as f64;
        let s2 = 2.0 * self.sigma * self.sigma;
        let one_d: Vec<f64> = (0..n)
            .map(|i| (-(i as f64 - c).powi(2) / s2).exp())
            .collect();
        let norm: f64 = one_d.iter().sum();
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                out.push(one_d[y] * one_d[x] / (norm * norm));
            }
        }
        out
    }
}

/// Accept `[H,W]` or `[1,..,1,H,W]` tensors as single images.
fn image_dims<T: Scalar>(t: &Tensor<'_, T>, op: &'static str) -> Result<(usize, usize)> {
    let shape = t.shape();
    if shape.len() >= 2 && shape[..shape.len() - 2].iter().all(|&d| d == 1) {
        Ok((shape[shape.len() - 2], shape[shape.len() - 1]))
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: shape,
            right: vec![0, 0],
        })
    }
}

enum DiffAxis {
    X,
    Y,
}

/// Central difference along one axis with replicate border:
/// g(x) = (v(x+1) - v(x-1)) / 2 with clamped neighbor indices.
fn central_diff<'g, T: Scalar>(img: Tensor<'g, T>, axis: DiffAxis) -> Result<Tensor<'g, T>> {
    let (h, w) = image_dims(&img, "central_diff")?;
    let flat = img.reshape(&[h, w])?;
    let half = T::from_f64(0.5);
    let out = flat.graph().with_values(&[flat.id()], |vals| {
        let v = vals[0];
        let mut out = vec![T::ZERO; h * w];
        match axis {
            DiffAxis::X => {
                for y in 0..h {
                    for x in 0..w {
                        let r = v[y * w + (x + 1).min(w - 1)];
                        let l = v[y * w + x.saturating_sub(1)];
                        out[y * w + x] = (r - l) * half;
                    }
                }
            }
            DiffAxis::Y => {
                for y in 0..h {
                    for x in 0..w {
                        let d = v[(y + 1).min(h - 1) * w + x];
                        let u = v[y.saturating_sub(1) * w + x];
                        out[y * w + x] = (d - u) * half;
                    }
                }
            }
        }
        out
    });
    let kernel: Box<dyn OpKernel<T>> = match axis {
        DiffAxis::X => Box::new(CentralDiffKernel { h, w, horizontal: true }),
        DiffAxis::Y => Box::new(CentralDiffKernel { h, w, horizontal: false }),
    };
    Ok(flat.graph().record(vec![h, w], out, &[flat], kernel))
}

struct CentralDiffKernel {
    h: usize,
    w: usize,
    horizontal: bool,
}

impl<T: Scalar> OpKernel<T> for CentralDiffKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        let half = T::from_f64(0.5);
        vec![parents[0].needs_grad.then(|| {
            let mut dx = vec![T::ZERO; self.h * self.w];
            for y in 0..self.h {
                for x in 0..self.w {
                    let gv = g[y * self.w + x] * half;
                    let (plus, minus) = if self.horizontal {
                        (y * self.w + (x + 1).min(self.w - 1), y * self.w + x.saturating_sub(1))
                    } else {
                        ((y + 1).min(self.h - 1) * self.w + x, y.saturating_sub(1) * self.w + x)
                    };
                    dx[plus] = dx[plus] + gv;
                    dx[minus] = dx[minus] - gv;
                }
            }
            dx
        })]
    }
}

/// Gradient information: the sum of squared gradient magnitudes over all
/// pixels. Zero iff the image is constant.
pub fn gradient_info<'g, T: Scalar>(y: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    let (h, w) = image_dims(&y, "gradient_info")?;
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "gradient_info needs at least a 2x2 image, got {h}x{w}"
        )));
    }
    let gx = central_diff(y, DiffAxis::X)?;
    let gy = central_diff(y, DiffAxis::Y)?;
    gx.mul(gx)?.add(gy.mul(gy)?)?.sum().reshape(&[1])
}

/// Plain-image gradient information (same arithmetic as the tensor op).
pub fn gradient_info_image(frame: &ImageFrame) -> Result<f64> {
    let (w, h) = (frame.width, frame.height);
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!(
            "gradient_info needs at least a 2x2 image, got {h}x{w}"
        )));
    }
    let v = &frame.pixels;
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            let gx = (v[y * w + (x + 1).min(w - 1)] - v[y * w + x.saturating_sub(1)]) * 0.5;
            let gy = (v[(y + 1).min(h - 1) * w + x] - v[y.saturating_sub(1) * w + x]) * 0.5;
            acc += gx * gx + gy * gy;
        }
    }
    Ok(acc)
}

/// Gradient information on the 8-bit level grid, as an exact integer sum
/// of squared central-difference numerators. One intensity unit of
/// gradient corresponds to `510` numerator units, so the floating-point
/// value is `sum / 510^2`.
pub fn gradient_info_levels(levels: &[u8], width: usize, height: usize) -> u64 {
    debug_assert_eq!(levels.len(), width * height);
    let mut acc: u64 = 0;
    for y in 0..height {
        for x in 0..width {
            let nx = levels[y * width + (x + 1).min(width - 1)] as i64
                - levels[y * width + x.saturating_sub(1)] as i64;
            let ny = levels[(y + 1).min(height - 1) * width + x] as i64
                - levels[y.saturating_sub(1) * width + x] as i64;
            acc += (nx * nx + ny * ny) as u64;
        }
    }
    acc
}

/// Scale of the integer gradient sums: (2 * 255)^2 numerator units per
/// intensity-squared unit.
pub const LEVEL_GRADIENT_SCALE: f64 = 510.0 * 510.0;

/// Logarithmic RMSE between two equally shaped tensors:
/// sqrt(mean((ln(y + eps) - ln(y_ref + eps))^2)).
pub fn log_rmse<'g, T: Scalar>(y: Tensor<'g, T>, y_ref: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    if y.shape() != y_ref.shape() {
        return Err(Error::ShapeMismatch {
            op: "log_rmse",
            left: y.shape(),
            right: y_ref.shape(),
        });
    }
    let eps = T::from_f64(LOG_EPS);
    let d = y.log_offset(eps)?.sub(y_ref.log_offset(eps)?)?;
    Ok(d.mul(d)?.mean().sqrt_smooth())
}

pub fn log_rmse_image(a: &ImageFrame, b: &ImageFrame) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch {
            op: "log_rmse",
            left: vec![a.height, a.width],
            right: vec![b.height, b.width],
        });
    }
    let mut acc = 0.0;
    for (x, y) in a.pixels.iter().zip(&b.pixels) {
        let d = (x + LOG_EPS).ln() - (y + LOG_EPS).ln();
        acc += d * d;
    }
    Ok((acc / a.pixels.len() as f64).sqrt())
}

fn as_nchw<'g, T: Scalar>(t: Tensor<'g, T>, op: &'static str) -> Result<Tensor<'g, T>> {
    let (h, w) = image_dims(&t, op)?;
    t.reshape(&[1, 1, h, w])
}

/// Structural similarity between two single-image tensors: the mean over
/// all Gaussian window positions of l*c*s (or l*c without the structure
/// term). Symmetric, 1 at identical inputs, differentiable.
pub fn ssim<'g, T: Scalar>(
    y1: Tensor<'g, T>,
    y2: Tensor<'g, T>,
    cfg: &SsimConfig,
) -> Result<Tensor<'g, T>> {
    cfg.validate()?;
    if y1.shape() != y2.shape() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            left: y1.shape(),
            right: y2.shape(),
        });
    }
    let (h, w) = image_dims(&y1, "ssim")?;
    if h < cfg.window || w < cfg.window {
        return Err(Error::InvalidArgument(format!(
            "ssim: image {h}x{w} smaller than {0}x{0} window",
            cfg.window
        )));
    }
    let a = as_nchw(y1, "ssim")?;
    let b = as_nchw(y2, "ssim")?;
    let g = a.graph();
    let win: Vec<T> = cfg
        .gaussian_window()
        .into_iter()
        .map(T::from_f64)
        .collect();
    let win = g.constant(win, &[1, 1, cfg.window, cfg.window])?;
    let zero_bias = g.constant(vec![T::ZERO], &[1])?;
    let filt = |t: Tensor<'g, T>| crate::nn::conv2d(t, win, zero_bias, 1, crate::nn::Padding::Valid);

    let c1 = T::from_f64(cfg.c1());
    let c2 = T::from_f64(cfg.c2());
    let c3 = T::from_f64(cfg.c3());
    let two = T::from_f64(2.0);

    let mu1 = filt(a)?;
    let mu2 = filt(b)?;
    let mu1_sq = mu1.mul(mu1)?;
    let mu2_sq = mu2.mul(mu2)?;
    let mu1_mu2 = mu1.mul(mu2)?;
    let sig1_sq = filt(a.mul(a)?)?.sub(mu1_sq)?;
    let sig2_sq = filt(b.mul(b)?)?.sub(mu2_sq)?;
    let sig12 = filt(a.mul(b)?)?.sub(mu1_mu2)?;

    // Luminance and contrast factors.
    let l = mu1_mu2
        .scalar_mul(two)
        .add_scalar(c1)
        .div(mu1_sq.add(mu2_sq)?.add_scalar(c1))?;
    // sigma1*sigma2 via the clamped variance product; the clamp only
    // bites where rounding makes a variance slightly negative.
    let sig1_sig2 = sig1_sq.relu().mul(sig2_sq.relu())?.sqrt_smooth();
    let c = sig1_sig2
        .scalar_mul(two)
        .add_scalar(c2)
        .div(sig1_sq.add(sig2_sq)?.add_scalar(c2))?;
    let mut map = l.mul(c)?;
    if cfg.include_structure {
        let s = sig12.add_scalar(c3).div(sig1_sig2.add_scalar(c3))?;
        map = map.mul(s)?;
    }
    map.mean().reshape(&[1])
}

/// DSSIM loss: (1 - ssim) / 2, in [0,1], zero iff ssim is 1.
pub fn dssim_loss<'g, T: Scalar>(
    y1: Tensor<'g, T>,
    y2: Tensor<'g, T>,
    cfg: &SsimConfig,
) -> Result<Tensor<'g, T>> {
    let s = ssim(y1, y2, cfg)?;
    Ok(s
        .scalar_mul(T::from_f64(-1.0))
        .add_scalar(T::ONE)
        .scalar_mul(T::from_f64(0.5)))
}

/// Forward-only SSIM between frames (f64 graph under the hood).
pub fn ssim_image(a: &ImageFrame, b: &ImageFrame, cfg: &SsimConfig) -> Result<f64> {
    let g: Graph<f64> = Graph::new();
    let ta = a.to_tensor(&g)?;
    let tb = b.to_tensor(&g)?;
    ssim(ta, tb, cfg)?.item()
}

pub fn dssim_image(a: &ImageFrame, b: &ImageFrame, cfg: &SsimConfig) -> Result<f64> {
    Ok((1.0 - ssim_image(a, b, cfg)?) / 2.0)
}
