//! Unsupervised domain adaptation for time-series classification:
//! contrastive source pretraining, autoregressive adversarial alignment and
//! teacher-guided class-conditional alignment, plus the evaluation harness.

// Validation deliberately writes `!(x > 0.0)` so that NaN is rejected, and the
// numeric kernels index several buffers per loop.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod adapt;
pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod runner;
pub mod stats;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
