//! Image enhancement for visual-odometry front-ends.
//!
//! A small encoder-decoder network is trained in three stages (pixel-wise
//! pre-training, siamese illumination invariance, temporal consistency)
//! to turn poorly exposed image sequences into gradient-rich, stable ones.
//! The crate bundles everything that pipeline needs: a reverse-mode
//! tensor tape, the neural layers, the objectives, a synthetic dataset
//! generator, the Adam trainer, classical histogram baselines and an
//! evaluation harness.

#![forbid(unsafe_code)]
// Negated comparisons (`!(x > 0.0)`) are NaN-rejecting range checks;
// `add`/`sub`/`mul`/`div` return `Result` by design; the numeric kernels
// index multiple buffers at once.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::should_implement_trait)]
#![allow(clippy::needless_range_loop)]

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod frame;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
