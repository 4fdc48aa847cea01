//! Differentiable neural building blocks: 2-D convolution, batch
//! normalization, 2x2 max pooling, nearest-neighbor upsampling and the
//! LSTM cell, plus the small glue ops (mat-vec, channel concat/mean/
//! broadcast) the enhancer graph is assembled from.
//!
//! All image tensors are `[N, C, H, W]` row-major.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{OpKernel, ParentView, Tensor};

/// Convolution border handling. `SameReplicate` clamps out-of-range
/// coordinates to the border pixel and requires an odd kernel and
/// stride 1, so spatial dimensions are preserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    SameReplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Running-statistics state of a batch-norm layer, updated by train-mode
/// forwards and consumed by inference.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::ZERO; channels],
            var: vec![T::ONE; channels],
        }
    }
}

fn dims4(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op,
            left: shape.to_vec(),
            right: vec![0, 0, 0, 0],
        });
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}

#[inline]
fn clamp_i(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Columns whose kernel window never touches a clamped border; empty
/// when the image is narrower than the kernel.
fn interior_columns(ow: usize, pad: usize, replicate: bool) -> (usize, usize) {
    if !replicate {
        (0, ow)
    } else if ow > 2 * pad {
        (pad, ow - pad)
    } else {
        (0, 0)
    }
}

/// Flattened `[out_extent x kernel]` table of input coordinates for a
/// convolution axis, with border clamping baked in for replicate
/// padding.
fn index_table(
    out_extent: usize,
    kernel: usize,
    stride: usize,
    pad: isize,
    input_extent: usize,
    replicate: bool,
) -> Vec<usize> {
    let mut tab = Vec::with_capacity(out_extent * kernel);
    for o in 0..out_extent {
        for k in 0..kernel {
            let i = (o * stride + k) as isize - pad;
            tab.push(if replicate {
                clamp_i(i, input_extent)
            } else {
                i as usize
            });
        }
    }
    tab
}

/// 2-D convolution of `input [N,C,H,W]` with `weight [O,C,kH,kW]` and
/// `bias [O]`. Differentiable w.r.t. input, weight and bias.
pub fn conv2d<'g, T: Scalar>(
    input: Tensor<'g, T>,
    weight: Tensor<'g, T>,
    bias: Tensor<'g, T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<'g, T>> {
    let [n, c, h, w] = dims4(&input.shape(), "conv2d input")?;
    let [oc, ic, kh, kw] = dims4(&weight.shape(), "conv2d weight")?;
    if ic != c {
        return Err(Error::InvalidArgument(format!(
            "conv2d: input has {c} channels but weight expects {ic}"
        )));
    }
    if bias.shape() != vec![oc] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            left: bias.shape(),
            right: vec![oc],
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
    }
    let (oh, ow, pad_h, pad_w) = match padding {
        Padding::Valid => {
            if h < kh || w < kw {
                return Err(Error::InvalidArgument(format!(
                    "conv2d: input {h}x{w} smaller than kernel {kh}x{kw} under valid padding"
                )));
            }
            ((h - kh) / stride + 1, (w - kw) / stride + 1, 0isize, 0isize)
        }
        Padding::SameReplicate => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::InvalidArgument(
                    "conv2d: same-replicate padding requires odd kernels".into(),
                ));
            }
            if stride != 1 {
                return Err(Error::InvalidArgument(
                    "conv2d: same-replicate padding requires stride 1".into(),
                ));
            }
            (h, w, (kh / 2) as isize, (kw / 2) as isize)
        }
    };

    let replicate = padding == Padding::SameReplicate;
    let iy_tab = index_table(oh, kh, stride, pad_h, h, replicate);
    let ix_tab = index_table(ow, kw, stride, pad_w, w, replicate);
    // For stride 1 the columns [x_lo, x_hi) need no border clamping and
    // reduce to shifted-slice multiply-adds, which vectorize. Images
    // narrower than the kernel have no such interior.
    let (x_lo, x_hi) = interior_columns(ow, pad_w as usize, replicate);
    let fast_cols = stride == 1 && x_lo < x_hi;
    let out = input
        .graph()
        .with_values(&[input.id(), weight.id(), bias.id()], |vals| {
            let (x, wt, b) = (vals[0], vals[1], vals[2]);
            let mut out = vec![T::ZERO; n * oc * oh * ow];
            for ni in 0..n {
                for o in 0..oc {
                    let out_base = (ni * oc + o) * oh * ow;
                    for v in &mut out[out_base..out_base + oh * ow] {
                        *v = b[o];
                    }
                    for ci in 0..c {
                        let in_base = (ni * c + ci) * h * w;
                        let w_base = (o * c + ci) * kh * kw;
                        for oy in 0..oh {
                            let orow = out_base + oy * ow;
                            for ky in 0..kh {
                                let xrow = in_base + iy_tab[oy * kh + ky] * w;
                                let wrow = &wt[w_base + ky * kw..w_base + (ky + 1) * kw];
                                if fast_cols {
                                    for (kx, &wv) in wrow.iter().enumerate() {
                                        let src = &x[xrow + x_lo + kx - pad_w as usize
                                            ..xrow + x_hi + kx - pad_w as usize];
                                        let dst = &mut out[orow + x_lo..orow + x_hi];
                                        for (d, &s) in dst.iter_mut().zip(src) {
                                            *d = *d + wv * s;
                                        }
                                    }
                                    for ox in (0..x_lo).chain(x_hi..ow) {
                                        let ixb = ox * kw;
                                        let mut acc = out[orow + ox];
                                        for (kx, &wv) in wrow.iter().enumerate() {
                                            acc = acc + wv * x[xrow + ix_tab[ixb + kx]];
                                        }
                                        out[orow + ox] = acc;
                                    }
                                } else {
                                    for ox in 0..ow {
                                        let ixb = ox * kw;
                                        let mut acc = out[orow + ox];
                                        for (kx, &wv) in wrow.iter().enumerate() {
                                            acc = acc + wv * x[xrow + ix_tab[ixb + kx]];
                                        }
                                        out[orow + ox] = acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            out
        });

    Ok(input.graph().record(
        vec![n, oc, oh, ow],
        out,
        &[input, weight, bias],
        Box::new(Conv2dKernel {
            stride,
            padding,
            dims: [n, c, h, w],
            kdims: [oc, ic, kh, kw],
            odims: [oh, ow],
        }),
    ))
}

struct Conv2dKernel {
    stride: usize,
    padding: Padding,
    dims: [usize; 4],
    kdims: [usize; 4],
    odims: [usize; 2],
}

impl<T: Scalar> OpKernel<T> for Conv2dKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = self.dims;
        let [oc, _, kh, kw] = self.kdims;
        let [oh, ow] = self.odims;
        let replicate = self.padding == Padding::SameReplicate;
        let (pad_h, pad_w) = if replicate {
            ((kh / 2) as isize, (kw / 2) as isize)
        } else {
            (0, 0)
        };
        let iy_tab = index_table(oh, kh, self.stride, pad_h, h, replicate);
        let ix_tab = index_table(ow, kw, self.stride, pad_w, w, replicate);
        let (x_lo, x_hi) = interior_columns(ow, pad_w as usize, replicate);
        let fast_cols = self.stride == 1 && x_lo < x_hi;
        let x = parents[0].value;
        let wt = parents[1].value;

        let mut dx = parents[0].needs_grad.then(|| vec![T::ZERO; x.len()]);
        let mut dw = parents[1].needs_grad.then(|| vec![T::ZERO; wt.len()]);
        let mut db = parents[2].needs_grad.then(|| vec![T::ZERO; oc]);

        for ni in 0..n {
            for o in 0..oc {
                let out_base = (ni * oc + o) * oh * ow;
                if let Some(db) = db.as_mut() {
                    let mut acc = T::ZERO;
                    for &gv in &g[out_base..out_base + oh * ow] {
                        acc = acc + gv;
                    }
                    db[o] = db[o] + acc;
                }
                for ci in 0..c {
                    let in_base = (ni * c + ci) * h * w;
                    let w_base = (o * c + ci) * kh * kw;
                    for oy in 0..oh {
                        let orow = out_base + oy * ow;
                        for ky in 0..kh {
                            let xrow = in_base + iy_tab[oy * kh + ky] * w;
                            let wrow = w_base + ky * kw;
                            if fast_cols {
                                let g_mid = &g[orow + x_lo..orow + x_hi];
                                for kx in 0..kw {
                                    let shift = x_lo + kx - pad_w as usize;
                                    if let Some(dx) = dx.as_mut() {
                                        let wv = wt[wrow + kx];
                                        let dst = &mut dx[xrow + shift..xrow + shift + g_mid.len()];
                                        for (d, &gv) in dst.iter_mut().zip(g_mid) {
                                            *d = *d + gv * wv;
                                        }
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        let src = &x[xrow + shift..xrow + shift + g_mid.len()];
                                        let mut acc = T::ZERO;
                                        for (&gv, &xv) in g_mid.iter().zip(src) {
                                            acc = acc + gv * xv;
                                        }
                                        dw[wrow + kx] = dw[wrow + kx] + acc;
                                    }
                                }
                                for ox in (0..x_lo).chain(x_hi..ow) {
                                    let gv = g[orow + ox];
                                    let ixb = ox * kw;
                                    for kx in 0..kw {
                                        let xi = xrow + ix_tab[ixb + kx];
                                        if let Some(dx) = dx.as_mut() {
                                            dx[xi] = dx[xi] + gv * wt[wrow + kx];
                                        }
                                        if let Some(dw) = dw.as_mut() {
                                            dw[wrow + kx] = dw[wrow + kx] + gv * x[xi];
                                        }
                                    }
                                }
                            } else {
                                for ox in 0..ow {
                                    let gv = g[orow + ox];
                                    let ixb = ox * kw;
                                    for kx in 0..kw {
                                        let xi = xrow + ix_tab[ixb + kx];
                                        if let Some(dx) = dx.as_mut() {
                                            dx[xi] = dx[xi] + gv * wt[wrow + kx];
                                        }
                                        if let Some(dw) = dw.as_mut() {
                                            dw[wrow + kx] = dw[wrow + kx] + gv * x[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![dx, dw, db]
    }
}

/// 2x2 max pooling with stride 2. Ties route the gradient to the first
/// maximal element in row-major order, deterministically.
pub fn max_pool2<T: Scalar>(input: Tensor<'_, T>) -> Result<Tensor<'_, T>> {
    let [n, c, h, w] = dims4(&input.shape(), "max_pool2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "max_pool2: spatial dims must be even, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let (out, argmax) = input.graph().with_values(&[input.id()], |vals| {
        let x = vals[0];
        let mut out = vec![T::ZERO; n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = in_base + (2 * oy) * w + 2 * ox;
                    let mut best = x[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = in_base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    out[out_base + oy * ow + ox] = best;
                    argmax[out_base + oy * ow + ox] = best_idx;
                }
            }
        }
        (out, argmax)
    });
    Ok(input.graph().record(
        vec![n, c, oh, ow],
        out,
        &[input],
        Box::new(MaxPool2Kernel { argmax }),
    ))
}

struct MaxPool2Kernel {
    argmax: Vec<usize>,
}

impl<T: Scalar> OpKernel<T> for MaxPool2Kernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        vec![parents[0].needs_grad.then(|| {
            let mut dx = vec![T::ZERO; parents[0].value.len()];
            for (gi, &src) in self.argmax.iter().enumerate() {
                dx[src] = dx[src] + g[gi];
            }
            dx
        })]
    }
}

/// Batch normalization over `[N,C,H,W]` with per-channel statistics.
///
/// Train mode normalizes by the batch's population statistics and folds
/// them into `running` with the given momentum; infer mode uses the
/// running statistics unchanged. Differentiable w.r.t. input, gamma and
/// beta in both modes.
pub fn batch_norm<'g, T: Scalar>(
    input: Tensor<'g, T>,
    gamma: Tensor<'g, T>,
    beta: Tensor<'g, T>,
    running: &mut RunningStats<T>,
    mode: BnMode,
    eps: T,
    momentum: T,
) -> Result<Tensor<'g, T>> {
    let [n, c, h, w] = dims4(&input.shape(), "batch_norm")?;
    if gamma.shape() != vec![c] || beta.shape() != vec![c] {
        return Err(Error::ShapeMismatch {
            op: "batch_norm scale/shift",
            left: gamma.shape(),
            right: vec![c],
        });
    }
    if running.mean.len() != c || running.var.len() != c {
        return Err(Error::InvalidArgument(format!(
            "batch_norm: running stats sized {} but input has {c} channels",
            running.mean.len()
        )));
    }
    let m = n * h * w;
    if mode == BnMode::Train && m < 2 {
        return Err(Error::InvalidArgument(
            "batch_norm: train mode needs at least 2 elements per channel".into(),
        ));
    }

    let m_t = T::from_f64(m as f64);
    let (out, xhat, inv_std, batch_stats) = input.graph().with_values(
        &[input.id(), gamma.id(), beta.id()],
        |vals| {
            let (x, ga, be) = (vals[0], vals[1], vals[2]);
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mut mean = vec![T::ZERO; c];
                    let mut var = vec![T::ZERO; c];
                    for ci in 0..c {
                        let mut acc = T::ZERO;
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            for &v in &x[base..base + h * w] {
                                acc = acc + v;
                            }
                        }
                        let mu = acc / m_t;
                        let mut vacc = T::ZERO;
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            for &v in &x[base..base + h * w] {
                                let d = v - mu;
                                vacc = vacc + d * d;
                            }
                        }
                        mean[ci] = mu;
                        var[ci] = vacc / m_t;
                    }
                    (mean, var)
                }
                BnMode::Infer => (running.mean.clone(), running.var.clone()),
            };
            let mut inv_std = vec![T::ZERO; c];
            for ci in 0..c {
                inv_std[ci] = T::ONE / (var[ci] + eps).sqrt();
            }
            let mut xhat = vec![T::ZERO; x.len()];
            let mut out = vec![T::ZERO; x.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for i in base..base + h * w {
                        let xh = (x[i] - mean[ci]) * inv_std[ci];
                        xhat[i] = xh;
                        out[i] = ga[ci] * xh + be[ci];
                    }
                }
            }
            let batch_stats = (mode == BnMode::Train).then_some((mean, var));
            (out, xhat, inv_std, batch_stats)
        },
    );
    if let Some((mean, var)) = batch_stats {
        for ci in 0..c {
            running.mean[ci] = (T::ONE - momentum) * running.mean[ci] + momentum * mean[ci];
            running.var[ci] = (T::ONE - momentum) * running.var[ci] + momentum * var[ci];
        }
    }

    Ok(input.graph().record(
        vec![n, c, h, w],
        out,
        &[input, gamma, beta],
        Box::new(BatchNormKernel {
            mode,
            dims: [n, c, h, w],
            xhat,
            inv_std,
        }),
    ))
}

struct BatchNormKernel<T> {
    mode: BnMode,
    dims: [usize; 4],
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> OpKernel<T> for BatchNormKernel<T> {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = self.dims;
        let m = n * h * w;
        let m_t = T::from_f64(m as f64);
        let gamma = parents[1].value;

        // dGamma and dBeta are channel sums over the upstream gradient.
        let mut dgamma = vec![T::ZERO; c];
        let mut dbeta = vec![T::ZERO; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                for i in base..base + h * w {
                    dgamma[ci] = dgamma[ci] + g[i] * self.xhat[i];
                    dbeta[ci] = dbeta[ci] + g[i];
                }
            }
        }

        let dx = parents[0].needs_grad.then(|| {
            let mut dx = vec![T::ZERO; g.len()];
            match self.mode {
                BnMode::Infer => {
                    // Affine map with fixed statistics.
                    for ni in 0..n {
                        for ci in 0..c {
                            let scale = gamma[ci] * self.inv_std[ci];
                            let base = (ni * c + ci) * h * w;
                            for i in base..base + h * w {
                                dx[i] = g[i] * scale;
                            }
                        }
                    }
                }
                BnMode::Train => {
                    // dx = gamma*inv_std/m * (m*g - sum(g) - xhat*sum(g*xhat))
                    for ci in 0..c {
                        let sum_g = dbeta[ci];
                        let sum_gx = dgamma[ci];
                        let scale = gamma[ci] * self.inv_std[ci] / m_t;
                        for ni in 0..n {
                            let base = (ni * c + ci) * h * w;
                            for i in base..base + h * w {
                                dx[i] = scale * (m_t * g[i] - sum_g - self.xhat[i] * sum_gx);
                            }
                        }
                    }
                }
            }
            dx
        });

        vec![
            dx,
            parents[1].needs_grad.then_some(dgamma),
            parents[2].needs_grad.then_some(dbeta),
        ]
    }
}

/// Nearest-neighbor 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample_nearest2<T: Scalar>(input: Tensor<'_, T>) -> Result<Tensor<'_, T>> {
    let [n, c, h, w] = dims4(&input.shape(), "upsample_nearest2")?;
    let (oh, ow) = (2 * h, 2 * w);
    let out = input.graph().with_values(&[input.id()], |vals| {
        let x = vals[0];
        let mut out = vec![T::ZERO; n * c * oh * ow];
        for nc in 0..n * c {
            let in_base = nc * h * w;
            let out_base = nc * oh * ow;
            for oy in 0..oh {
                let iy = oy / 2;
                for ox in 0..ow {
                    out[out_base + oy * ow + ox] = x[in_base + iy * w + ox / 2];
                }
            }
        }
        out
    });
    Ok(input.graph().record(
        vec![n, c, oh, ow],
        out,
        &[input],
        Box::new(Upsample2Kernel { dims: [n, c, h, w] }),
    ))
}

struct Upsample2Kernel {
    dims: [usize; 4],
}

impl<T: Scalar> OpKernel<T> for Upsample2Kernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        let [n, c, h, w] = self.dims;
        let (oh, ow) = (2 * h, 2 * w);
        vec![parents[0].needs_grad.then(|| {
            let mut dx = vec![T::ZERO; n * c * h * w];
            for nc in 0..n * c {
                let in_base = nc * h * w;
                let out_base = nc * oh * ow;
                for oy in 0..oh {
                    let iy = oy / 2;
                    for ox in 0..ow {
                        let di = in_base + iy * w + ox / 2;
                        dx[di] = dx[di] + g[out_base + oy * ow + ox];
                    }
                }
            }
            dx
        })]
    }
}

/// Matrix-vector product `w [H,D] . x [D] -> [H]`.
pub fn matvec<'g, T: Scalar>(w: Tensor<'g, T>, x: Tensor<'g, T>) -> Result<Tensor<'g, T>> {
    let ws = w.shape();
    let xs = x.shape();
    if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
        return Err(Error::ShapeMismatch {
            op: "matvec",
            left: ws,
            right: xs,
        });
    }
    let (h, d) = (ws[0], ws[1]);
    let out = w.graph().with_values(&[w.id(), x.id()], |vals| {
        let (wv, xv) = (vals[0], vals[1]);
        let mut out = vec![T::ZERO; h];
        for r in 0..h {
            let mut acc = T::ZERO;
            for c in 0..d {
                acc = acc + wv[r * d + c] * xv[c];
            }
            out[r] = acc;
        }
        out
    });
    Ok(w
        .graph()
        .record(vec![h], out, &[w, x], Box::new(MatVecKernel { h, d })))
}

struct MatVecKernel {
    h: usize,
    d: usize,
}

impl<T: Scalar> OpKernel<T> for MatVecKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        let w = parents[0].value;
        let x = parents[1].value;
        let dw = parents[0].needs_grad.then(|| {
            let mut dw = vec![T::ZERO; self.h * self.d];
            for r in 0..self.h {
                for c in 0..self.d {
                    dw[r * self.d + c] = g[r] * x[c];
                }
            }
            dw
        });
        let dx = parents[1].needs_grad.then(|| {
            let mut dx = vec![T::ZERO; self.d];
            for r in 0..self.h {
                for c in 0..self.d {
                    dx[c] = dx[c] + g[r] * w[r * self.d + c];
                }
            }
            dx
        });
        vec![dw, dx]
    }
}

/// Concatenate two `[N,C,H,W]` tensors along the channel axis.
pub fn concat_channels<'g, T: Scalar>(
    a: Tensor<'g, T>,
    b: Tensor<'g, T>,
) -> Result<Tensor<'g, T>> {
    let [na, ca, ha, wa] = dims4(&a.shape(), "concat_channels")?;
    let [nb, cb, hb, wb] = dims4(&b.shape(), "concat_channels")?;
    if na != nb || ha != hb || wa != wb {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let plane = ha * wa;
    let out = a.graph().with_values(&[a.id(), b.id()], |vals| {
        let (av, bv) = (vals[0], vals[1]);
        let mut out = Vec::with_capacity((ca + cb) * na * plane);
        for ni in 0..na {
            out.extend_from_slice(&av[ni * ca * plane..(ni + 1) * ca * plane]);
            out.extend_from_slice(&bv[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        out
    });
    Ok(a.graph().record(
        vec![na, ca + cb, ha, wa],
        out,
        &[a, b],
        Box::new(ConcatChannelsKernel {
            n: na,
            ca,
            cb,
            plane,
        }),
    ))
}

struct ConcatChannelsKernel {
    n: usize,
    ca: usize,
    cb: usize,
    plane: usize,
}

impl<T: Scalar> OpKernel<T> for ConcatChannelsKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        let stride = (self.ca + self.cb) * self.plane;
        let da = parents[0].needs_grad.then(|| {
            let mut da = Vec::with_capacity(self.n * self.ca * self.plane);
            for ni in 0..self.n {
                da.extend_from_slice(&g[ni * stride..ni * stride + self.ca * self.plane]);
            }
            da
        });
        let db = parents[1].needs_grad.then(|| {
            let mut db = Vec::with_capacity(self.n * self.cb * self.plane);
            for ni in 0..self.n {
                db.extend_from_slice(
                    &g[ni * stride + self.ca * self.plane..(ni + 1) * stride],
                );
            }
            db
        });
        vec![da, db]
    }
}

/// Spatial mean per channel: `[1,C,H,W] -> [C]`.
pub fn channel_mean<T: Scalar>(input: Tensor<'_, T>) -> Result<Tensor<'_, T>> {
    let [n, c, h, w] = dims4(&input.shape(), "channel_mean")?;
    if n != 1 {
        return Err(Error::InvalidArgument(
            "channel_mean: only batch size 1 is supported".into(),
        ));
    }
    let plane = h * w;
    let plane_t = T::from_f64(plane as f64);
    let out = input.graph().with_values(&[input.id()], |vals| {
        let x = vals[0];
        let mut out = vec![T::ZERO; c];
        for ci in 0..c {
            let mut acc = T::ZERO;
            for &v in &x[ci * plane..(ci + 1) * plane] {
                acc = acc + v;
            }
            out[ci] = acc / plane_t;
        }
        out
    });
    Ok(input.graph().record(
        vec![c],
        out,
        &[input],
        Box::new(ChannelMeanKernel { c, plane }),
    ))
}

struct ChannelMeanKernel {
    c: usize,
    plane: usize,
}

impl<T: Scalar> OpKernel<T> for ChannelMeanKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        let plane_t = T::from_f64(self.plane as f64);
        vec![parents[0].needs_grad.then(|| {
            let mut dx = vec![T::ZERO; self.c * self.plane];
            for ci in 0..self.c {
                let gv = g[ci] / plane_t;
                for v in &mut dx[ci * self.plane..(ci + 1) * self.plane] {
                    *v = gv;
                }
            }
            dx
        })]
    }
}

/// Add a per-channel vector `[C]` to every spatial position of
/// `[1,C,H,W]`.
pub fn channel_broadcast_add<'g, T: Scalar>(
    input: Tensor<'g, T>,
    v: Tensor<'g, T>,
) -> Result<Tensor<'g, T>> {
    let [n, c, h, w] = dims4(&input.shape(), "channel_broadcast_add")?;
    if n != 1 || v.shape() != vec![c] {
        return Err(Error::ShapeMismatch {
            op: "channel_broadcast_add",
            left: input.shape(),
            right: v.shape(),
        });
    }
    let plane = h * w;
    let out = input.graph().with_values(&[input.id(), v.id()], |vals| {
        let (x, vv) = (vals[0], vals[1]);
        let mut out = vec![T::ZERO; x.len()];
        for ci in 0..c {
            for i in 0..plane {
                out[ci * plane + i] = x[ci * plane + i] + vv[ci];
            }
        }
        out
    });
    Ok(input.graph().record(
        vec![1, c, h, w],
        out,
        &[input, v],
        Box::new(ChannelBroadcastAddKernel { c, plane }),
    ))
}

struct ChannelBroadcastAddKernel {
    c: usize,
    plane: usize,
}

impl<T: Scalar> OpKernel<T> for ChannelBroadcastAddKernel {
    fn backward(&self, g: &[T], _out: &[T], parents: &[ParentView<'_, T>]) -> Vec<Option<Vec<T>>> {
        let dx = parents[0].needs_grad.then(|| g.to_vec());
        let dv = parents[1].needs_grad.then(|| {
            let mut dv = vec![T::ZERO; self.c];
            for ci in 0..self.c {
                for i in 0..self.plane {
                    dv[ci] = dv[ci] + g[ci * self.plane + i];
                }
            }
            dv
        });
        vec![dx, dv]
    }
}

/// Graph-bound weights of one LSTM layer (gate order: input, forget,
/// output, candidate).
pub struct LstmStepWeights<'g, T: Scalar> {
    pub w: [Tensor<'g, T>; 4],
    pub u: [Tensor<'g, T>; 4],
    pub b: [Tensor<'g, T>; 4],
}

/// One LSTM step with the standard gate equations:
/// i,f,o = sigmoid(Wx + Uh + b), g = tanh(Wx + Uh + b),
/// c' = f*c + i*g, h' = o*tanh(c').
pub fn lstm_step<'g, T: Scalar>(
    x: Tensor<'g, T>,
    h: Tensor<'g, T>,
    c: Tensor<'g, T>,
    weights: &LstmStepWeights<'g, T>,
) -> Result<(Tensor<'g, T>, Tensor<'g, T>)> {
    let hidden = h.shape();
    if c.shape() != hidden {
        return Err(Error::ShapeMismatch {
            op: "lstm_step state",
            left: hidden,
            right: c.shape(),
        });
    }
    let mut gates = Vec::with_capacity(4);
    for k in 0..4 {
        let pre = matvec(weights.w[k], x)?
            .add(matvec(weights.u[k], h)?)?
            .add(weights.b[k])?;
        gates.push(pre);
    }
    let i = gates[0].sigmoid();
    let f = gates[1].sigmoid();
    let o = gates[2].sigmoid();
    let g = gates[3].tanh();
    let c_next = f.mul(c)?.add(i.mul(g)?)?;
    let h_next = o.mul(c_next.tanh())?;
    Ok((h_next, c_next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    fn t<'g>(g: &'g Graph<f64>, data: &[f64], shape: &[usize]) -> Tensor<'g, f64> {
        g.leaf(data.to_vec(), shape, true).unwrap()
    }

    #[test]
    fn conv_scalar_kernel_scales() {
        let g = Graph::new();
        let x = t(&g, &[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let w = t(&g, &[2.0], &[1, 1, 1, 1]);
        let b = t(&g, &[0.0], &[1]);
        let y = conv2d(x, w, b, 1, Padding::Valid).unwrap();
        assert_eq!(y.value(), vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_all_ones_sums() {
        let g = Graph::new();
        let x = t(&g, &[1.0; 9], &[1, 1, 3, 3]);
        let w = t(&g, &[1.0; 9], &[1, 1, 3, 3]);
        let b = t(&g, &[0.0], &[1]);
        let y = conv2d(x, w, b, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.value(), vec![9.0]);
    }

    #[test]
    fn conv_1x3_dot_product() {
        let g = Graph::new();
        let x = t(&g, &[0.0, 1.0, 0.0], &[1, 1, 1, 3]);
        let w = t(&g, &[1.0, 0.0, -1.0], &[1, 1, 1, 3]);
        let b = t(&g, &[0.0], &[1]);
        let y = conv2d(x, w, b, 1, Padding::Valid).unwrap();
        assert_eq!(y.value(), vec![0.0]);
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let g = Graph::new();
        let x = t(&g, &[0.0; 8], &[1, 2, 2, 2]);
        let w = t(&g, &[0.0; 1], &[1, 1, 1, 1]);
        let b = t(&g, &[0.0], &[1]);
        assert!(conv2d(x, w, b, 1, Padding::Valid).is_err());
    }

    #[test]
    fn conv_input_smaller_than_kernel_rejected() {
        let g = Graph::new();
        let x = t(&g, &[0.0; 4], &[1, 1, 2, 2]);
        let w = t(&g, &[0.0; 9], &[1, 1, 3, 3]);
        let b = t(&g, &[0.0], &[1]);
        assert!(conv2d(x, w, b, 1, Padding::Valid).is_err());
    }

    #[test]
    fn pool_takes_block_max() {
        let g = Graph::new();
        let x = t(&g, &[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let y = max_pool2(x).unwrap();
        assert_eq!(y.value(), vec![4.0]);
    }

    #[test]
    fn pool_constant_stays_constant() {
        let g = Graph::new();
        let x = t(&g, &[0.7; 16], &[1, 1, 4, 4]);
        let y = max_pool2(x).unwrap();
        assert_eq!(y.value(), vec![0.7; 4]);
    }

    #[test]
    fn pool_tie_routes_to_first_row_major() {
        let g = Graph::new();
        let x = t(&g, &[4.0, 4.0, 1.0, 1.0], &[1, 1, 2, 2]);
        let y = max_pool2(x).unwrap();
        assert_eq!(y.value(), vec![4.0]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_rejects_odd_dims() {
        let g = Graph::new();
        let x = t(&g, &[0.0; 6], &[1, 1, 2, 3]);
        assert!(max_pool2(x).is_err());
    }

    #[test]
    fn bn_normalizes_plus_minus_one() {
        let g = Graph::new();
        let x = t(&g, &[-1.0, 1.0], &[2, 1, 1, 1]);
        let ga = t(&g, &[1.0], &[1]);
        let be = t(&g, &[0.0], &[1]);
        let mut rs = RunningStats::identity(1);
        let eps = 1e-5;
        let y = batch_norm(x, ga, be, &mut rs, BnMode::Train, eps, 0.1).unwrap();
        let expect = 1.0 / (1.0f64 + eps).sqrt();
        let v = y.value();
        assert!((v[0] + expect).abs() < 1e-12);
        assert!((v[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn bn_infer_with_identity_stats() {
        let g = Graph::new();
        let x = t(&g, &[0.3, -0.4, 0.9, 0.0], &[1, 1, 2, 2]);
        let ga = t(&g, &[1.0], &[1]);
        let be = t(&g, &[0.0], &[1]);
        let mut rs = RunningStats::identity(1);
        let eps = 1e-5;
        let y = batch_norm(x, ga, be, &mut rs, BnMode::Infer, eps, 0.1).unwrap();
        let scale = 1.0 / (1.0f64 + eps).sqrt();
        for (o, i) in y.value().iter().zip(x.value()) {
            assert!((o - i * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_zero_gamma_gives_constant_beta() {
        let g = Graph::new();
        let x = t(&g, &[0.1, 0.5, -0.2, 0.8], &[1, 1, 2, 2]);
        let ga = t(&g, &[0.0], &[1]);
        let be = t(&g, &[0.25], &[1]);
        let mut rs = RunningStats::identity(1);
        let y = batch_norm(x, ga, be, &mut rs, BnMode::Train, 1e-5, 0.1).unwrap();
        assert_eq!(y.value(), vec![0.25; 4]);
    }

    #[test]
    fn bn_single_element_train_rejected() {
        let g = Graph::new();
        let x = t(&g, &[0.1], &[1, 1, 1, 1]);
        let ga = t(&g, &[1.0], &[1]);
        let be = t(&g, &[0.0], &[1]);
        let mut rs = RunningStats::identity(1);
        assert!(batch_norm(x, ga, be, &mut rs, BnMode::Train, 1e-5, 0.1).is_err());
    }

    #[test]
    fn upsample_replicates_blocks() {
        let g = Graph::new();
        let x = t(&g, &[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let y = upsample_nearest2(x).unwrap();
        assert_eq!(
            y.value(),
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn upsample_backward_sums_blocks() {
        let g = Graph::new();
        let x = t(&g, &[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        upsample_nearest2(x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0; 4]);
    }

    #[test]
    fn pool_of_upsample_is_identity() {
        let g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64) / 23.0).collect();
        let x = t(&g, &data, &[1, 2, 3, 4]);
        let y = max_pool2(upsample_nearest2(x).unwrap()).unwrap();
        assert_eq!(y.value(), data);
    }

    fn zero_lstm<'g>(
        g: &'g Graph<f64>,
        d: usize,
        h: usize,
        biases: [f64; 4],
    ) -> LstmStepWeights<'g, f64> {
        let w = std::array::from_fn(|_| g.leaf(vec![0.0; h * d], &[h, d], true).unwrap());
        let u = std::array::from_fn(|_| g.leaf(vec![0.0; h * h], &[h, h], true).unwrap());
        let b = std::array::from_fn(|k| g.leaf(vec![biases[k]; h], &[h], true).unwrap());
        LstmStepWeights { w, u, b }
    }

    #[test]
    fn lstm_all_zero_stays_zero() {
        let g = Graph::new();
        let weights = zero_lstm(&g, 2, 3, [0.0; 4]);
        let x = t(&g, &[0.4, -0.3], &[2]);
        let h = g.constant(vec![0.0; 3], &[3]).unwrap();
        let c = g.constant(vec![0.0; 3], &[3]).unwrap();
        let (h2, c2) = lstm_step(x, h, c, &weights).unwrap();
        assert_eq!(h2.value(), vec![0.0; 3]);
        assert_eq!(c2.value(), vec![0.0; 3]);
    }

    #[test]
    fn lstm_forget_bias_preserves_cell() {
        let g = Graph::new();
        // forget-gate bias 10 with unit cell state: c' ~= sigmoid(10).
        let weights = zero_lstm(&g, 2, 1, [0.0, 10.0, 0.0, 0.0]);
        let x = t(&g, &[0.7, -0.1], &[2]);
        let h = g.constant(vec![0.0], &[1]).unwrap();
        let c = g.constant(vec![1.0], &[1]).unwrap();
        let (_, c2) = lstm_step(x, h, c, &weights).unwrap();
        let sig10 = 1.0 / (1.0 + (-10.0f64).exp());
        assert!((c2.value()[0] - sig10).abs() < 1e-12);
        assert!((c2.value()[0] - 0.99995).abs() < 1e-4);
    }

    #[test]
    fn lstm_candidate_and_input_bias_drive_cell() {
        let g = Graph::new();
        // input-gate and candidate biases 10, zero state and input:
        // c' ~= sigmoid(10) * tanh(10).
        let weights = zero_lstm(&g, 2, 1, [10.0, 0.0, 0.0, 10.0]);
        let x = g.constant(vec![0.0, 0.0], &[2]).unwrap();
        let h = g.constant(vec![0.0], &[1]).unwrap();
        let c = g.constant(vec![0.0], &[1]).unwrap();
        let (_, c2) = lstm_step(x, h, c, &weights).unwrap();
        let expect = (1.0 / (1.0 + (-10.0f64).exp())) * 10.0f64.tanh();
        assert!((c2.value()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn lstm_dimension_mismatch_rejected() {
        let g = Graph::new();
        let weights = zero_lstm(&g, 2, 3, [0.0; 4]);
        let x = t(&g, &[0.1, 0.2], &[2]);
        let h = g.constant(vec![0.0; 3], &[3]).unwrap();
        let c = g.constant(vec![0.0; 2], &[2]).unwrap();
        assert!(lstm_step(x, h, c, &weights).is_err());
    }

    #[test]
    fn same_replicate_on_image_narrower_than_kernel() {
        // 2x2 input under a 5x5 kernel: every window column is clamped.
        let g = Graph::new();
        let x = t(&g, &[1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
        let w = t(&g, &[1.0; 25], &[1, 1, 5, 5]);
        let b = t(&g, &[0.0], &[1]);
        let y = conv2d(x, w, b, 1, Padding::SameReplicate).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 2, 2]);
        // Replicate-clamped sum: each output counts border pixels by
        // their clamp multiplicity; hand value for position (0,0):
        // rows clamp to [0,0,0,1,1], cols to [0,0,0,1,1]:
        // 9*1 + 6*2 + 6*3 + 4*4 = 55.
        assert_eq!(y.value()[0], 55.0);
        y.sum().backward().unwrap();
        assert!(x.grad().is_some());
    }

    #[test]
    fn broadcast_add_and_channel_mean() {
        let g = Graph::new();
        let x = t(&g, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[1, 2, 2, 2]);
        let v = t(&g, &[10.0, 20.0], &[2]);
        let y = channel_broadcast_add(x, v).unwrap();
        assert_eq!(
            y.value(),
            vec![11.0, 12.0, 13.0, 14.0, 25.0, 26.0, 27.0, 28.0]
        );
        let m = channel_mean(x).unwrap();
        assert_eq!(m.value(), vec![2.5, 6.5]);
    }

    #[test]
    fn same_replicate_preserves_shape_for_odd_kernels() {
        for k in [1usize, 3, 5, 7] {
            let g = Graph::new();
            let x = t(&g, &vec![0.5; 8 * 10], &[1, 1, 8, 10]);
            let w = t(&g, &vec![0.1; k * k], &[1, 1, k, k]);
            let b = t(&g, &[0.0], &[1]);
            let y = conv2d(x, w, b, 1, Padding::SameReplicate).unwrap();
            assert_eq!(y.shape(), vec![1, 1, 8, 10], "kernel {k}");
        }
    }
}
