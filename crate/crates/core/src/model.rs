//! The small encoder-decoder enhancer: three conv/bn/pool encoder
//! blocks, an optional two-layer LSTM over the spatially pooled
//! bottleneck vector, three upsample/conv/bn decoder blocks, and a 1x1
//! merge head over the concatenated decoder output and input image with
//! a final sigmoid.
//!
//! Parameters live outside any graph as plain buffers; every forward
//! pass binds them as leaves of a fresh tape.

use crate::error::{Error, Result};
use crate::frame::ImageFrame;
use crate::nn::{
    self, BnMode, LstmStepWeights, Padding, RunningStats,
};
use crate::rng::pcg_salted;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

pub const KERNEL: usize = 5;

/// One named parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Param<T> {
    fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Param {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running: RunningStats<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Scalar> {
    pub conv: ConvLayer<T>,
    pub bn: BnLayer<T>,
}

/// Weights of one LSTM layer; gate order input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer<T: Scalar> {
    pub w: [Param<T>; 4],
    pub u: [Param<T>; 4],
    pub b: [Param<T>; 4],
}

pub const GATE_NAMES: [&str; 4] = ["i", "f", "o", "g"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnhancerConfig {
    pub widths: [usize; 3],
    pub recurrent: bool,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        EnhancerConfig {
            widths: [16, 32, 64],
            recurrent: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerParams<T: Scalar> {
    pub widths: [usize; 3],
    pub encoder: Vec<Block<T>>,
    pub decoder: Vec<Block<T>>,
    pub merge: ConvLayer<T>,
    pub recurrent: Option<Vec<LstmLayer<T>>>,
}

/// Recurrent state carried between frames outside any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState<T: Scalar> {
    pub h: Vec<Vec<T>>,
    pub c: Vec<Vec<T>>,
}

impl<T: Scalar> RecurrentState<T> {
    pub fn zeros(hidden: usize, layers: usize) -> Self {
        RecurrentState {
            h: vec![vec![T::ZERO; hidden]; layers],
            c: vec![vec![T::ZERO; hidden]; layers],
        }
    }
}

fn glorot<T: Scalar>(rng: &mut rand_pcg::Pcg64, shape: &[usize], fan_in: usize, fan_out: usize) -> Vec<T> {
    use rand::RngExt;
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect()
}

fn conv_layer<T: Scalar>(
    rng: &mut rand_pcg::Pcg64,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    k: usize,
) -> ConvLayer<T> {
    let shape = vec![out_ch, in_ch, k, k];
    let weight = glorot(rng, &shape, in_ch * k * k, out_ch * k * k);
    ConvLayer {
        weight: Param::new(format!("{prefix}.weight"), shape, weight),
        bias: Param::new(format!("{prefix}.bias"), vec![out_ch], vec![T::ZERO; out_ch]),
    }
}

fn bn_layer<T: Scalar>(prefix: &str, ch: usize) -> BnLayer<T> {
    BnLayer {
        gamma: Param::new(format!("{prefix}.gamma"), vec![ch], vec![T::ONE; ch]),
        beta: Param::new(format!("{prefix}.beta"), vec![ch], vec![T::ZERO; ch]),
        running: RunningStats::identity(ch),
    }
}

fn lstm_layer<T: Scalar>(rng: &mut rand_pcg::Pcg64, prefix: &str, dim: usize) -> LstmLayer<T> {
    let w = std::array::from_fn(|k| {
        Param::new(
            format!("{prefix}.w_{}", GATE_NAMES[k]),
            vec![dim, dim],
            glorot(rng, &[dim, dim], dim, dim),
        )
    });
    let u = std::array::from_fn(|k| {
        Param::new(
            format!("{prefix}.u_{}", GATE_NAMES[k]),
            vec![dim, dim],
            glorot(rng, &[dim, dim], dim, dim),
        )
    });
    let b = std::array::from_fn(|k| {
        Param::new(
            format!("{prefix}.b_{}", GATE_NAMES[k]),
            vec![dim],
            vec![T::ZERO; dim],
        )
    });
    LstmLayer { w, u, b }
}

impl<T: Scalar> EnhancerParams<T> {
    /// Fresh parameters: conv and LSTM weights uniform in
    /// +-sqrt(6 / (fan_in + fan_out)), biases zero, batch-norm gamma 1 /
    /// beta 0, running stats identity. Deterministic per seed.
    pub fn init(config: &EnhancerConfig, seed: u64) -> Result<Self> {
        let [w0, w1, w2] = config.widths;
        if w0 == 0 || w1 == 0 || w2 == 0 {
            return Err(Error::InvalidArgument(
                "channel widths must be positive".into(),
            ));
        }
        let mut rng = pcg_salted(seed, 0x1217);
        let enc_io = [(1usize, w0), (w0, w1), (w1, w2)];
        let encoder = enc_io
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| Block {
                conv: conv_layer(&mut rng, &format!("enc{i}.conv"), cin, cout, KERNEL),
                bn: bn_layer(&format!("enc{i}.bn"), cout),
            })
            .collect();
        let dec_io = [(w2, w1), (w1, w0), (w0, 1usize)];
        let decoder = dec_io
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout))| Block {
                conv: conv_layer(&mut rng, &format!("dec{i}.conv"), cin, cout, KERNEL),
                bn: bn_layer(&format!("dec{i}.bn"), cout),
            })
            .collect();
        let merge = conv_layer(&mut rng, "merge", 2, 1, 1);
        let recurrent = config.recurrent.then(|| {
            (0..2)
                .map(|i| lstm_layer(&mut rng, &format!("lstm{i}"), w2))
                .collect()
        });
        Ok(EnhancerParams {
            widths: config.widths,
            encoder,
            decoder,
            merge,
            recurrent,
        })
    }

    /// Attach freshly initialized LSTM layers to a non-recurrent model.
    pub fn into_recurrent(mut self, seed: u64) -> Self {
        if self.recurrent.is_none() {
            let mut rng = pcg_salted(seed, 0x15f3);
            let dim = self.widths[2];
            self.recurrent = Some(
                (0..2)
                    .map(|i| lstm_layer(&mut rng, &format!("lstm{i}"), dim))
                    .collect(),
            );
        }
        self
    }

    pub fn is_recurrent(&self) -> bool {
        self.recurrent.is_some()
    }

    pub fn config(&self) -> EnhancerConfig {
        EnhancerConfig {
            widths: self.widths,
            recurrent: self.is_recurrent(),
        }
    }

    /// Bottleneck shape `[channels, H/8, W/8]` for a given input size.
    pub fn bottleneck_shape(&self, width: usize, height: usize) -> Result<[usize; 3]> {
        check_dims(width, height)?;
        Ok([self.widths[2], height / 8, width / 8])
    }

    /// Learnable parameters in canonical order.
    pub fn learnable(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        for block in self.encoder.iter().chain(&self.decoder) {
            out.push(&block.conv.weight);
            out.push(&block.conv.bias);
            out.push(&block.bn.gamma);
            out.push(&block.bn.beta);
        }
        out.push(&self.merge.weight);
        out.push(&self.merge.bias);
        if let Some(layers) = &self.recurrent {
            for layer in layers {
                for k in 0..4 {
                    out.push(&layer.w[k]);
                    out.push(&layer.u[k]);
                    out.push(&layer.b[k]);
                }
            }
        }
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for block in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            out.push(&mut block.conv.weight);
            out.push(&mut block.conv.bias);
            out.push(&mut block.bn.gamma);
            out.push(&mut block.bn.beta);
        }
        out.push(&mut self.merge.weight);
        out.push(&mut self.merge.bias);
        if let Some(layers) = &mut self.recurrent {
            for layer in layers {
                // Same gate-major order as `learnable`.
                for ((w, u), b) in layer
                    .w
                    .iter_mut()
                    .zip(layer.u.iter_mut())
                    .zip(layer.b.iter_mut())
                {
                    out.push(w);
                    out.push(u);
                    out.push(b);
                }
            }
        }
        out
    }

    /// Every named tensor including batch-norm running statistics, in
    /// canonical order; this is the checkpoint tensor table.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = Vec::new();
        let push_block = |out: &mut Vec<(String, Vec<usize>, Vec<T>)>, prefix: &str, block: &Block<T>| {
            out.push((
                block.conv.weight.name.clone(),
                block.conv.weight.shape.clone(),
                block.conv.weight.data.clone(),
            ));
            out.push((
                block.conv.bias.name.clone(),
                block.conv.bias.shape.clone(),
                block.conv.bias.data.clone(),
            ));
            out.push((
                block.bn.gamma.name.clone(),
                block.bn.gamma.shape.clone(),
                block.bn.gamma.data.clone(),
            ));
            out.push((
                block.bn.beta.name.clone(),
                block.bn.beta.shape.clone(),
                block.bn.beta.data.clone(),
            ));
            let ch = block.bn.running.mean.len();
            out.push((
                format!("{prefix}.bn.running_mean"),
                vec![ch],
                block.bn.running.mean.clone(),
            ));
            out.push((
                format!("{prefix}.bn.running_var"),
                vec![ch],
                block.bn.running.var.clone(),
            ));
        };
        for (i, block) in self.encoder.iter().enumerate() {
            push_block(&mut out, &format!("enc{i}"), block);
        }
        for (i, block) in self.decoder.iter().enumerate() {
            push_block(&mut out, &format!("dec{i}"), block);
        }
        out.push((
            self.merge.weight.name.clone(),
            self.merge.weight.shape.clone(),
            self.merge.weight.data.clone(),
        ));
        out.push((
            self.merge.bias.name.clone(),
            self.merge.bias.shape.clone(),
            self.merge.bias.data.clone(),
        ));
        if let Some(layers) = &self.recurrent {
            for layer in layers {
                for k in 0..4 {
                    for p in [&layer.w[k], &layer.u[k], &layer.b[k]] {
                        out.push((p.name.clone(), p.shape.clone(), p.data.clone()));
                    }
                }
            }
        }
        out
    }

    /// Hex digest over the full tensor table; equal digests mean
    /// bit-identical parameters.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for (name, shape, data) in self.named_tensors() {
            bytes.extend_from_slice(name.as_bytes());
            for d in shape {
                bytes.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        crate::data::sha256_hex(&bytes)
    }
}

pub fn check_dims(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 || !width.is_multiple_of(8) || !height.is_multiple_of(8) {
        return Err(Error::InvalidArgument(format!(
            "dimensions must be divisible by 8, got {width}x{height}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Infer,
}

struct BoundBlock<'g, T: Scalar> {
    weight: Tensor<'g, T>,
    bias: Tensor<'g, T>,
    gamma: Tensor<'g, T>,
    beta: Tensor<'g, T>,
    running: RunningStats<T>,
}

struct BoundLstm<'g, T: Scalar> {
    weights: LstmStepWeights<'g, T>,
}

/// In-graph recurrent state for unrolled (BPTT) training.
pub struct StateTensors<'g, T: Scalar> {
    pub h: Vec<Tensor<'g, T>>,
    pub c: Vec<Tensor<'g, T>>,
}

/// Parameters bound onto one graph. All forwards through the same pass
/// share leaves, which is exactly the weight sharing the siamese stage
/// requires. Train-mode batch-norm statistics accumulate in the pass;
/// call [`ForwardPass::store_running`] to fold them back into the
/// parameter struct after the step.
pub struct ForwardPass<'g, T: Scalar> {
    graph: &'g Graph<T>,
    mode: ForwardMode,
    hidden: usize,
    leaves: Vec<(String, Tensor<'g, T>)>,
    encoder: Vec<BoundBlock<'g, T>>,
    decoder: Vec<BoundBlock<'g, T>>,
    merge_w: Tensor<'g, T>,
    merge_b: Tensor<'g, T>,
    lstm: Option<Vec<BoundLstm<'g, T>>>,
    bn_eps: T,
    bn_momentum: T,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<'g, T: Scalar> ForwardPass<'g, T> {
    pub fn bind(
        graph: &'g Graph<T>,
        params: &EnhancerParams<T>,
        mode: ForwardMode,
        trainable: bool,
    ) -> Result<Self> {
        let mut leaves = Vec::new();
        let mut bind_param = |p: &Param<T>| -> Result<Tensor<'g, T>> {
            let t = graph.leaf(p.data.clone(), &p.shape, trainable)?;
            if trainable {
                leaves.push((p.name.clone(), t));
            }
            Ok(t)
        };
        let mut bind_block = |block: &Block<T>| -> Result<BoundBlock<'g, T>> {
            Ok(BoundBlock {
                weight: bind_param(&block.conv.weight)?,
                bias: bind_param(&block.conv.bias)?,
                gamma: bind_param(&block.bn.gamma)?,
                beta: bind_param(&block.bn.beta)?,
                running: block.bn.running.clone(),
            })
        };
        let encoder = params
            .encoder
            .iter()
            .map(&mut bind_block)
            .collect::<Result<Vec<_>>>()?;
        let decoder = params
            .decoder
            .iter()
            .map(&mut bind_block)
            .collect::<Result<Vec<_>>>()?;
        let merge_w = bind_param(&params.merge.weight)?;
        let merge_b = bind_param(&params.merge.bias)?;
        let lstm = match &params.recurrent {
            None => None,
            Some(layers) => {
                let mut bound = Vec::with_capacity(layers.len());
                for layer in layers {
                    let mut bind4 = |ps: &[Param<T>; 4]| -> Result<[Tensor<'g, T>; 4]> {
                        Ok([
                            bind_param(&ps[0])?,
                            bind_param(&ps[1])?,
                            bind_param(&ps[2])?,
                            bind_param(&ps[3])?,
                        ])
                    };
                    bound.push(BoundLstm {
                        weights: LstmStepWeights {
                            w: bind4(&layer.w)?,
                            u: bind4(&layer.u)?,
                            b: bind4(&layer.b)?,
                        },
                    });
                }
                Some(bound)
            }
        };
        Ok(ForwardPass {
            graph,
            mode,
            hidden: params.widths[2],
            leaves,
            encoder,
            decoder,
            merge_w,
            merge_b,
            lstm,
            bn_eps: T::from_f64(BN_EPS),
            bn_momentum: T::from_f64(BN_MOMENTUM),
        })
    }

    /// Named parameter leaves (for gradient extraction after backward).
    pub fn leaves(&self) -> &[(String, Tensor<'g, T>)] {
        &self.leaves
    }

    pub fn is_recurrent(&self) -> bool {
        self.lstm.is_some()
    }

    pub fn zero_state(&self) -> Result<StateTensors<'g, T>> {
        let layers = self.lstm.as_ref().map(|l| l.len()).unwrap_or(0);
        let mut h = Vec::with_capacity(layers);
        let mut c = Vec::with_capacity(layers);
        for _ in 0..layers {
            h.push(self.graph.constant(vec![T::ZERO; self.hidden], &[self.hidden])?);
            c.push(self.graph.constant(vec![T::ZERO; self.hidden], &[self.hidden])?);
        }
        Ok(StateTensors { h, c })
    }

    pub fn state_from(&self, state: &RecurrentState<T>) -> Result<StateTensors<'g, T>> {
        let mut h = Vec::new();
        let mut c = Vec::new();
        for (hv, cv) in state.h.iter().zip(&state.c) {
            if hv.len() != self.hidden || cv.len() != self.hidden {
                return Err(Error::Architecture(format!(
                    "recurrent state of width {} does not match bottleneck width {}",
                    hv.len(),
                    self.hidden
                )));
            }
            h.push(self.graph.constant(hv.clone(), &[self.hidden])?);
            c.push(self.graph.constant(cv.clone(), &[self.hidden])?);
        }
        Ok(StateTensors { h, c })
    }

    fn bn_mode(&self) -> BnMode {
        match self.mode {
            ForwardMode::Train => BnMode::Train,
            ForwardMode::Infer => BnMode::Infer,
        }
    }

    /// One forward through the enhancer. `input` is `[1,1,H,W]` (or
    /// `[N,1,H,W]` for the non-recurrent model). Returns the output
    /// image tensor and, for recurrent models, the advanced state.
    pub fn run(
        &mut self,
        input: Tensor<'g, T>,
        state: Option<&StateTensors<'g, T>>,
    ) -> Result<(Tensor<'g, T>, Option<StateTensors<'g, T>>)> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::InvalidArgument(format!(
                "enhancer input must be [N,1,H,W], got {shape:?}"
            )));
        }
        check_dims(shape[3], shape[2])?;
        if state.is_some() && self.lstm.is_none() {
            return Err(Error::Architecture(
                "recurrent state passed to a non-recurrent model".into(),
            ));
        }
        if self.lstm.is_some() && shape[0] != 1 {
            return Err(Error::InvalidArgument(
                "recurrent model processes one frame at a time".into(),
            ));
        }

        let bn_mode = self.bn_mode();
        let mut x = input;
        for i in 0..self.encoder.len() {
            let block = &mut self.encoder[i];
            x = nn::conv2d(x, block.weight, block.bias, 1, Padding::SameReplicate)?;
            x = nn::batch_norm(
                x,
                block.gamma,
                block.beta,
                &mut block.running,
                bn_mode,
                self.bn_eps,
                self.bn_momentum,
            )?;
            x = x.relu();
            x = nn::max_pool2(x)?;
        }

        let mut next_state = None;
        if let Some(lstm) = &self.lstm {
            let prev_owned;
            let prev = match state {
                Some(s) => s,
                None => {
                    prev_owned = self.zero_state()?;
                    &prev_owned
                }
            };
            if prev.h.len() != lstm.len() {
                return Err(Error::Architecture(format!(
                    "state has {} layers, model has {}",
                    prev.h.len(),
                    lstm.len()
                )));
            }
            let mut v = nn::channel_mean(x)?;
            let mut hs = Vec::with_capacity(lstm.len());
            let mut cs = Vec::with_capacity(lstm.len());
            for (li, layer) in lstm.iter().enumerate() {
                let (h_next, c_next) = nn::lstm_step(v, prev.h[li], prev.c[li], &layer.weights)?;
                v = h_next;
                hs.push(h_next);
                cs.push(c_next);
            }
            x = nn::channel_broadcast_add(x, v)?;
            next_state = Some(StateTensors { h: hs, c: cs });
        }

        for i in 0..self.decoder.len() {
            let block = &mut self.decoder[i];
            x = nn::upsample_nearest2(x)?;
            x = nn::conv2d(x, block.weight, block.bias, 1, Padding::SameReplicate)?;
            x = nn::batch_norm(
                x,
                block.gamma,
                block.beta,
                &mut block.running,
                bn_mode,
                self.bn_eps,
                self.bn_momentum,
            )?;
            x = x.relu();
        }

        let merged = nn::concat_channels(x, input)?;
        let out = nn::conv2d(merged, self.merge_w, self.merge_b, 1, Padding::Valid)?.sigmoid();
        Ok((out, next_state))
    }

    /// Fold the batch-norm running statistics accumulated by train-mode
    /// forwards back into the parameter struct.
    pub fn store_running(&self, params: &mut EnhancerParams<T>) {
        for (bound, block) in self.encoder.iter().zip(params.encoder.iter_mut()) {
            block.bn.running = bound.running.clone();
        }
        for (bound, block) in self.decoder.iter().zip(params.decoder.iter_mut()) {
            block.bn.running = bound.running.clone();
        }
    }
}

/// Enhance one frame. For recurrent models the caller owns the state:
/// pass `None` to start a sequence and feed each returned state into the
/// next call.
///
/// Normalization layers use the frame's own statistics — the same
/// function training optimizes — which keeps enhancement deterministic,
/// stateless across frames, and invariant to global brightness shifts.
/// Parameter running statistics are left untouched.
pub fn enhance<T: Scalar>(
    params: &EnhancerParams<T>,
    input: &ImageFrame,
    state: Option<&RecurrentState<T>>,
) -> Result<(ImageFrame, Option<RecurrentState<T>>)> {
    check_dims(input.width, input.height)?;
    if state.is_some() && !params.is_recurrent() {
        return Err(Error::Architecture(
            "recurrent state passed to a non-recurrent model".into(),
        ));
    }
    let graph: Graph<T> = Graph::new();
    let mut pass = ForwardPass::bind(&graph, params, ForwardMode::Train, false)?;
    let x = input.to_tensor(&graph)?;
    let state_tensors = match state {
        Some(s) => Some(pass.state_from(s)?),
        None => None,
    };
    let (out, next) = pass.run(x, state_tensors.as_ref())?;
    let frame = ImageFrame::from_tensor(&out, input.meta)?;
    let next_state = next.map(|s| RecurrentState {
        h: s.h.iter().map(|t| t.value()).collect(),
        c: s.c.iter().map(|t| t.value()).collect(),
    });
    Ok((frame, next_state))
}
