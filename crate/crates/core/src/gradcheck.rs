//! Finite-difference verification of every differentiable operation.
//!
//! The oracle is deliberately primitive: it re-evaluates the forward
//! function at centrally perturbed inputs (step 1e-6) at 64-bit
//! precision and compares against the recorded backward pass with
//! rtol 1e-4 / atol 1e-8. It never touches the backward code it checks.
//!
//! The individual `check_*` functions panic with a description on the
//! first mismatch; both the unit tests and the acceptance suite drive
//! them.

use rand::RngExt;
use rand_pcg::Pcg64;

use crate::model::{EnhancerConfig, EnhancerParams, ForwardMode, ForwardPass};
use crate::nn::{self, LstmStepWeights, Padding, RunningStats};
use crate::objectives::{dssim_loss, gradient_info, log_rmse, ssim, SsimConfig};
use crate::tensor::{Graph, Tensor};

pub const FD_STEP: f64 = 1e-6;
pub const RTOL: f64 = 1e-4;
pub const ATOL: f64 = 1e-8;

pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Input {
    pub fn random(rng: &mut Pcg64, shape: &[usize], lo: f64, hi: f64) -> Self {
        let n: usize = shape.iter().product();
        Input {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.random_range(lo..hi)).collect(),
        }
    }
}

pub fn rng(seed: u64) -> Pcg64 {
    crate::rng::pcg_salted(seed, 0xfd)
}

/// Check the analytic gradient of `build` against central finite
/// differences for every element of every input.
pub fn gradcheck<F>(name: &str, inputs: &[Input], build: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Tensor<'g, f64>]) -> crate::Result<Tensor<'g, f64>>,
{
    let graph: Graph<f64> = Graph::new();
    let leaves: Vec<Tensor<'_, f64>> = inputs
        .iter()
        .map(|i| graph.leaf(i.data.clone(), &i.shape, true).unwrap())
        .collect();
    let loss = build(&graph, &leaves).unwrap_or_else(|e| panic!("{name}: forward failed: {e}"));
    assert_eq!(loss.len(), 1, "{name}: gradcheck needs a scalar loss");
    loss.backward().unwrap();
    let grads: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| panic!("{name}: missing grad")))
        .collect();

    let eval = |datasets: &[Vec<f64>]| -> f64 {
        let g: Graph<f64> = Graph::new();
        let ls: Vec<Tensor<'_, f64>> = datasets
            .iter()
            .zip(inputs)
            .map(|(d, i)| g.constant(d.clone(), &i.shape).unwrap())
            .collect();
        build(&g, &ls).unwrap().item().unwrap()
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|i| i.data.clone()).collect();
    for (ii, input) in inputs.iter().enumerate() {
        for j in 0..input.data.len() {
            let mut plus = base.clone();
            plus[ii][j] += FD_STEP;
            let mut minus = base.clone();
            minus[ii][j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let analytic = grads[ii][j];
            let tol = ATOL + RTOL * analytic.abs().max(numeric.abs());
            assert!(
                (analytic - numeric).abs() <= tol,
                "{name}: input {ii} element {j}: analytic {analytic} vs numeric {numeric} (tol {tol})"
            );
        }
    }
}

pub fn check_elementwise_binary() {
    let mut r = rng(1);
    for dims in [vec![5], vec![2, 3], vec![2, 2, 3], vec![2, 1, 3, 2]] {
        let a = Input::random(&mut r, &dims, -1.0, 1.0);
        let b = Input::random(&mut r, &dims, 0.3, 1.5); // divisor kept away from zero
        gradcheck("add", &[a, b], |_, t| Ok(t[0].add(t[1])?.mul(t[1])?.sum()));
        let a = Input::random(&mut r, &dims, -1.0, 1.0);
        let b = Input::random(&mut r, &dims, 0.3, 1.5);
        gradcheck("sub_mul", &[a, b], |_, t| {
            Ok(t[0].sub(t[1])?.mul(t[0])?.sum())
        });
        let a = Input::random(&mut r, &dims, -1.0, 1.0);
        let b = Input::random(&mut r, &dims, 0.3, 1.5);
        gradcheck("div", &[a, b], |_, t| Ok(t[0].div(t[1])?.sum()));
    }
}

pub fn check_elementwise_unary() {
    let mut r = rng(2);
    let dims = [3, 4];
    let x = Input::random(&mut r, &dims, -2.0, 2.0);
    gradcheck("sigmoid", &[x], |_, t| Ok(t[0].sigmoid().sum()));
    let x = Input::random(&mut r, &dims, -2.0, 2.0);
    gradcheck("tanh", &[x], |_, t| Ok(t[0].tanh().sum()));
    let x = Input::random(&mut r, &dims, -2.0, 2.0);
    gradcheck("relu", &[x], |_, t| Ok(t[0].relu().sum()));
    let x = Input::random(&mut r, &dims, 0.1, 2.0);
    gradcheck("sqrt", &[x], |_, t| Ok(t[0].sqrt_smooth().sum()));
    let x = Input::random(&mut r, &dims, 0.0, 1.0);
    gradcheck("log_offset", &[x], |_, t| {
        t[0].log_offset(1e-6)?.mean().reshape(&[1])
    });
    let x = Input::random(&mut r, &dims, -1.0, 1.0);
    gradcheck("scalar_ops", &[x], |_, t| {
        Ok(t[0].scalar_mul(1.7).add_scalar(-0.3).sum())
    });
    // Clamp bounds chosen so no sample sits near a boundary.
    let x = Input::random(&mut r, &dims, -1.0, 1.0);
    gradcheck("clamp", &[x], |_, t| {
        Ok(t[0].clamp(-0.5000003, 0.4999997)?.sum())
    });
}

pub fn check_reductions() {
    let mut r = rng(3);
    let x = Input::random(&mut r, &[2, 3, 2], -1.0, 1.0);
    gradcheck("mean", &[x], |_, t| Ok(t[0].mean()));
    let x = Input::random(&mut r, &[6], -1.0, 1.0);
    gradcheck("reshape_sum", &[x], |_, t| {
        Ok(t[0].reshape(&[2, 3])?.mul(t[0].reshape(&[2, 3])?)?.sum())
    });
}

pub fn check_glue_ops() {
    let mut r = rng(4);
    let w = Input::random(&mut r, &[3, 4], -1.0, 1.0);
    let x = Input::random(&mut r, &[4], -1.0, 1.0);
    gradcheck("matvec", &[w, x], |_, t| {
        Ok(nn::matvec(t[0], t[1])?.sigmoid().sum())
    });

    let a = Input::random(&mut r, &[1, 2, 3, 2], -1.0, 1.0);
    let b = Input::random(&mut r, &[1, 3, 3, 2], -1.0, 1.0);
    gradcheck("concat_channels", &[a, b], |_, t| {
        Ok(nn::concat_channels(t[0], t[1])?.tanh().sum())
    });

    let x = Input::random(&mut r, &[1, 3, 2, 4], -1.0, 1.0);
    gradcheck("channel_mean", &[x], |_, t| {
        Ok(nn::channel_mean(t[0])?.sigmoid().sum())
    });

    let x = Input::random(&mut r, &[1, 3, 2, 2], -1.0, 1.0);
    let v = Input::random(&mut r, &[3], -1.0, 1.0);
    gradcheck("channel_broadcast_add", &[x, v], |_, t| {
        Ok(nn::channel_broadcast_add(t[0], t[1])?.tanh().sum())
    });
}

pub fn check_conv2d() {
    let mut r = rng(5);
    let x = Input::random(&mut r, &[1, 2, 5, 6], -1.0, 1.0);
    let w = Input::random(&mut r, &[3, 2, 3, 3], -1.0, 1.0);
    let b = Input::random(&mut r, &[3], -0.5, 0.5);
    gradcheck("conv_valid", &[x, w, b], |_, t| {
        Ok(nn::conv2d(t[0], t[1], t[2], 1, Padding::Valid)?.tanh().sum())
    });
    let x = Input::random(&mut r, &[2, 1, 6, 6], -1.0, 1.0);
    let w = Input::random(&mut r, &[2, 1, 3, 3], -1.0, 1.0);
    let b = Input::random(&mut r, &[2], -0.5, 0.5);
    gradcheck("conv_stride2", &[x, w, b], |_, t| {
        Ok(nn::conv2d(t[0], t[1], t[2], 2, Padding::Valid)?.sum())
    });
    let x = Input::random(&mut r, &[1, 2, 4, 5], -1.0, 1.0);
    let w = Input::random(&mut r, &[2, 2, 5, 5], -1.0, 1.0);
    let b = Input::random(&mut r, &[2], -0.5, 0.5);
    gradcheck("conv_same_replicate", &[x, w, b], |_, t| {
        Ok(nn::conv2d(t[0], t[1], t[2], 1, Padding::SameReplicate)?
            .sigmoid()
            .sum())
    });
}

pub fn check_pool_and_upsample() {
    let mut r = rng(6);
    let x = Input::random(&mut r, &[1, 2, 4, 6], -1.0, 1.0);
    gradcheck("max_pool2", &[x], |_, t| Ok(nn::max_pool2(t[0])?.tanh().sum()));
    let x = Input::random(&mut r, &[1, 2, 3, 2], -1.0, 1.0);
    gradcheck("upsample_nearest2", &[x], |_, t| {
        Ok(nn::upsample_nearest2(t[0])?.sigmoid().sum())
    });
}

pub fn check_batch_norm() {
    let mut r = rng(7);
    let x = Input::random(&mut r, &[2, 2, 3, 2], -1.0, 1.0);
    let gamma = Input::random(&mut r, &[2], 0.5, 1.5);
    let beta = Input::random(&mut r, &[2], -0.5, 0.5);
    gradcheck("batch_norm_train", &[x, gamma, beta], |_, t| {
        let mut running = RunningStats::identity(2);
        Ok(
            nn::batch_norm(t[0], t[1], t[2], &mut running, nn::BnMode::Train, 1e-5, 0.1)?
                .tanh()
                .sum(),
        )
    });
    let x = Input::random(&mut r, &[1, 2, 2, 2], -1.0, 1.0);
    let gamma = Input::random(&mut r, &[2], 0.5, 1.5);
    let beta = Input::random(&mut r, &[2], -0.5, 0.5);
    gradcheck("batch_norm_infer", &[x, gamma, beta], |_, t| {
        let mut running = RunningStats {
            mean: vec![0.1, -0.2],
            var: vec![0.8, 1.3],
        };
        Ok(
            nn::batch_norm(t[0], t[1], t[2], &mut running, nn::BnMode::Infer, 1e-5, 0.1)?
                .sigmoid()
                .sum(),
        )
    });
}

pub fn check_lstm_two_step() {
    let mut r = rng(8);
    let (d, h) = (3usize, 2usize);
    let mut inputs = Vec::new();
    // x0, x1, then per gate: w, u, b.
    inputs.push(Input::random(&mut r, &[d], -1.0, 1.0));
    inputs.push(Input::random(&mut r, &[d], -1.0, 1.0));
    for _ in 0..4 {
        inputs.push(Input::random(&mut r, &[h, d], -0.8, 0.8));
        inputs.push(Input::random(&mut r, &[h, h], -0.8, 0.8));
        inputs.push(Input::random(&mut r, &[h], -0.3, 0.3));
    }
    gradcheck("lstm_2step", &inputs, |g, t| {
        let weights = LstmStepWeights {
            w: [t[2], t[5], t[8], t[11]],
            u: [t[3], t[6], t[9], t[12]],
            b: [t[4], t[7], t[10], t[13]],
        };
        let h0 = g.constant(vec![0.0; 2], &[2])?;
        let c0 = g.constant(vec![0.0; 2], &[2])?;
        let (h1, c1) = nn::lstm_step(t[0], h0, c0, &weights)?;
        let (h2, _c2) = nn::lstm_step(t[1], h1, c1, &weights)?;
        Ok(h1.add(h2)?.sum())
    });
}

pub fn check_objectives() {
    let mut r = rng(9);
    let img = [16usize, 16usize];
    let y = Input::random(&mut r, &img, 0.05, 0.95);
    gradcheck("gradient_info", &[y], |_, t| gradient_info(t[0]));

    let a = Input::random(&mut r, &img, 0.05, 0.95);
    let b = Input::random(&mut r, &img, 0.05, 0.95);
    gradcheck("log_rmse", &[a, b], |_, t| log_rmse(t[0], t[1]));

    let a = Input::random(&mut r, &img, 0.05, 0.95);
    let b = Input::random(&mut r, &img, 0.05, 0.95);
    gradcheck("ssim", &[a, b], |_, t| ssim(t[0], t[1], &SsimConfig::default()));

    let a = Input::random(&mut r, &img, 0.05, 0.95);
    let b = Input::random(&mut r, &img, 0.05, 0.95);
    gradcheck("ssim_no_structure", &[a, b], |_, t| {
        ssim(t[0], t[1], &SsimConfig::without_structure())
    });

    let a = Input::random(&mut r, &img, 0.05, 0.95);
    let b = Input::random(&mut r, &img, 0.05, 0.95);
    gradcheck("dssim", &[a, b], |_, t| {
        dssim_loss(t[0], t[1], &SsimConfig::default())
    });
}

pub fn check_composed_chain() {
    let mut r = rng(10);
    let x = Input::random(&mut r, &[1, 1, 6, 6], -1.0, 1.0);
    let w = Input::random(&mut r, &[2, 1, 3, 3], -1.0, 1.0);
    let b = Input::random(&mut r, &[2], -0.5, 0.5);
    gradcheck("conv_pool_sigmoid_mean", &[x, w, b], |_, t| {
        let c = nn::conv2d(t[0], t[1], t[2], 1, Padding::Valid)?;
        Ok(nn::max_pool2(c)?.sigmoid().mean())
    });
}

/// Full enhancer gradient check on a 16x16 input: loss = mean(output),
/// differentiated w.r.t. every parameter group; the recurrent variant
/// unrolls two steps.
pub fn check_enhancer_end_to_end(recurrent: bool) {
    let config = EnhancerConfig {
        widths: [2, 3, 4],
        recurrent,
    };
    let params: EnhancerParams<f64> = EnhancerParams::init(&config, 21).unwrap();
    let mut r = rng(11);
    let image: Vec<f64> = (0..16 * 16).map(|_| r.random_range(0.05..0.95)).collect();
    let image2: Vec<f64> = (0..16 * 16).map(|_| r.random_range(0.05..0.95)).collect();

    let eval_loss = |p: &EnhancerParams<f64>| -> f64 {
        let g: Graph<f64> = Graph::new();
        let mut pass = ForwardPass::bind(&g, p, ForwardMode::Train, false).unwrap();
        let x = g.constant(image.clone(), &[1, 1, 16, 16]).unwrap();
        if recurrent {
            let s0 = pass.zero_state().unwrap();
            let (o1, s1) = pass.run(x, Some(&s0)).unwrap();
            let x2 = g.constant(image2.clone(), &[1, 1, 16, 16]).unwrap();
            let (o2, _) = pass.run(x2, s1.as_ref()).unwrap();
            o1.mean().add(o2.mean()).unwrap().item().unwrap()
        } else {
            let (o, _) = pass.run(x, None).unwrap();
            o.mean().item().unwrap()
        }
    };

    let analytic: std::collections::BTreeMap<String, Vec<f64>> = {
        let g: Graph<f64> = Graph::new();
        let mut pass = ForwardPass::bind(&g, &params, ForwardMode::Train, true).unwrap();
        let x = g.constant(image.clone(), &[1, 1, 16, 16]).unwrap();
        let loss = if recurrent {
            let s0 = pass.zero_state().unwrap();
            let (o1, s1) = pass.run(x, Some(&s0)).unwrap();
            let x2 = g.constant(image2.clone(), &[1, 1, 16, 16]).unwrap();
            let (o2, _) = pass.run(x2, s1.as_ref()).unwrap();
            o1.mean().add(o2.mean()).unwrap()
        } else {
            let (o, _) = pass.run(x, None).unwrap();
            o.mean()
        };
        loss.backward().unwrap();
        pass.leaves()
            .iter()
            .map(|(name, t)| (name.clone(), t.grad().unwrap()))
            .collect()
    };

    let h = FD_STEP;
    let mut checked = 0usize;
    for p in params.learnable() {
        let grads = &analytic[&p.name];
        for j in 0..p.data.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            for q in plus.learnable_mut() {
                if q.name == p.name {
                    q.data[j] += h;
                }
            }
            for q in minus.learnable_mut() {
                if q.name == p.name {
                    q.data[j] -= h;
                }
            }
            let numeric = (eval_loss(&plus) - eval_loss(&minus)) / (2.0 * h);
            let tol = ATOL + RTOL * grads[j].abs().max(numeric.abs());
            assert!(
                (grads[j] - numeric).abs() <= tol,
                "{} [{j}]: analytic {} vs numeric {numeric}",
                p.name,
                grads[j]
            );
            checked += 1;
        }
    }
    assert!(checked > 500, "expected to cover every parameter group");
}

/// The whole suite, as the acceptance gate runs it.
pub fn run_full_suite() {
    check_elementwise_binary();
    check_elementwise_unary();
    check_reductions();
    check_glue_ops();
    check_conv2d();
    check_pool_and_upsample();
    check_batch_norm();
    check_lstm_two_step();
    check_objectives();
    check_composed_chain();
    check_enhancer_end_to_end(false);
    check_enhancer_end_to_end(true);
}
