//! Encoder, recurrent context summarizer, prediction heads, classifier and
//! domain discriminators, each owning a [`ParamStore`].

mod bundle;
mod classifier;
mod context;
mod discriminator;
mod encoder;
pub mod presets;

pub use bundle::{ModelBundle, ModelConfig, Role};
pub use classifier::Classifier;
pub use context::{ContextNet, ContextNetConfig, PredictionHeads};
pub use discriminator::{ArDiscriminator, Discriminator, DiscriminatorConfig, DiscriminatorKind, FcDiscriminator};
pub use encoder::{BnBatchStats, ChannelGrowth, Encoder, EncoderConfig};
pub use presets::ArchPreset;

use rand::Rng as _;

use crate::rng::Rng;
use crate::tensor::Tensor;

/// Whether batch normalization uses batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `U(-bound, bound)` initialization.
pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches length")
}

/// Default weight scale for a layer with `fan_in` inputs.
pub(crate) fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}
