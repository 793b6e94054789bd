//! Shared fixtures for the integration suites: micro models, independent
//! loss oracles and a finite-difference gradient checker.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsda_core::autograd::Tape;
use tsda_core::models::{
    ChannelGrowth, ContextNetConfig, Discriminator, DiscriminatorConfig, DiscriminatorKind, EncoderConfig, ModelBundle,
    ModelConfig,
};
use tsda_core::params::{BindMode, Bound, ParamStore};
use tsda_core::rng;
use tsda_core::Tensor;

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two conv layers over 16 steps give K′ = 5 features of width 3.
pub fn micro_config() -> ModelConfig {
    let encoder = EncoderConfig {
        input_channels: 2,
        num_layers: 2,
        channels: 3,
        growth: ChannelGrowth::Constant,
        widths: None,
        kernel_size: 4,
        stride: 2,
        padding: None,
    };
    ModelConfig {
        input_length: 16,
        num_classes: 3,
        encoder,
        context: ContextNetConfig {
            input_dim: 3,
            hidden_dim: 4,
            num_layers: 1,
        },
        discriminator: DiscriminatorConfig {
            input_channels: 3,
            hidden_dim: 4,
            num_layers: 1,
            num_heads: 2,
            feedforward_dim: 6,
        },
        horizon: Some(2),
    }
}

/// A micro bundle plus a discriminator of either kind.
pub struct Micro {
    pub bundle: ModelBundle,
    pub disc: Discriminator,
}

impl Micro {
    pub fn new(kind: DiscriminatorKind, seed: u64) -> Self {
        let cfg = micro_config();
        let len = cfg.feature_len().unwrap();
        assert!(len <= 6);
        let bundle = ModelBundle::new(cfg.clone(), seed).unwrap();
        let disc = Discriminator::new(kind, &cfg.discriminator, len, &mut rng::stream(seed, "test/disc")).unwrap();
        Self { bundle, disc }
    }

    /// Encoder, context, heads, classifier, discriminator.
    pub fn stores(&self) -> [&ParamStore; 5] {
        let [e, c, h, k] = self.bundle.stores();
        [e, c, h, k, self.disc.store()]
    }

    fn store_mut(&mut self, i: usize) -> &mut ParamStore {
        if i == 4 {
            return self.disc.store_mut();
        }
        self.bundle.stores_mut().into_iter().nth(i).unwrap()
    }

    fn bind(&self, tape: &mut Tape, active: &[usize]) -> Vec<Bound> {
        self.stores()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.bind(
                    tape,
                    if active.contains(&i) {
                        BindMode::Train
                    } else {
                        BindMode::Constant
                    },
                )
            })
            .collect()
    }
}

/// Builds a scalar loss from the bound stores (encoder, context, heads,
/// classifier, discriminator).
pub type LossFn<'a> = dyn Fn(&Micro, &mut Tape, &[Bound]) -> tsda_core::autograd::Var + 'a;

/// Worst per-tensor relative error `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` between
/// backpropagated and central-difference gradients over the trainable
/// parameters of the `active` stores.
pub fn gradient_check(m: &mut Micro, active: &[usize], loss: &LossFn, step: f64) -> f64 {
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, active);
    let l = loss(m, &mut tape, &bound);
    let grads = tape.backward(l).unwrap();
    let analytic: Vec<Vec<Option<Tensor>>> = bound.iter().map(|b| b.grads(&grads)).collect();
    let eval = |m: &Micro| {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape, &[]);
        let l = loss(m, &mut tape, &bound);
        tape.value(l).item()
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for &s in active {
        for p in 0..m.stores()[s].len() {
            if !m.stores()[s].get(p).trainable {
                continue;
            }
            let original = m.stores()[s].value(p).clone();
            let mut numeric = vec![0.0; original.len()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let mut plus = original.clone();
                plus.data_mut()[j] += step;
                m.store_mut(s).set_value(p, plus).unwrap();
                let up = eval(m);
                let mut minus = original.clone();
                minus.data_mut()[j] -= step;
                m.store_mut(s).set_value(p, minus).unwrap();
                let down = eval(m);
                *slot = (up - down) / (2.0 * step);
            }
            m.store_mut(s).set_value(p, original.clone()).unwrap();
            let a: Vec<f64> = analytic[s][p]
                .as_ref()
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; original.len()]);
            let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let scale = norm(&a).max(norm(&numeric));
            if scale > 1e-9 {
                worst = worst.max(diff / scale);
            } else {
                worst = worst.max(diff);
            }
            checked += 1;
        }
    }
    assert!(checked > 0, "no trainable parameters checked");
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Log-sum-exp of a slice.
pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Contrastive loss with the full `B × B` score matrix written out: row `i`
/// scores its prediction against every future in the batch and the matching
/// one is the positive.
pub fn cpc_oracle(predicted: &[Tensor], futures: &[Tensor]) -> f64 {
    let mut total = 0.0;
    for (z, h) in predicted.iter().zip(futures) {
        let (b, c) = (z.dim(0), z.dim(1));
        let mut scores = vec![vec![0.0; b]; b];
        for (i, row) in scores.iter_mut().enumerate() {
            for (j, s) in row.iter_mut().enumerate() {
                *s = (0..c).map(|d| z.data()[i * c + d] * h.data()[j * c + d]).sum();
            }
        }
        let loss: f64 = scores.iter().enumerate().map(|(i, row)| logsumexp(row) - row[i]).sum();
        total += loss / b as f64;
    }
    total / predicted.len() as f64
}

/// Two-sided signed-rank p-value by enumerating every sign pattern.
pub fn wilcoxon_brute_force(a: &[f64], b: &[f64]) -> f64 {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    let mags: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    // average ranks, computed quadratically and independently of the library
    let ranks: Vec<f64> = mags
        .iter()
        .map(|&m| {
            let below = mags.iter().filter(|&&o| o < m).count() as f64;
            let equal = mags.iter().filter(|&&o| o == m).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let w_plus = |signs: u64| -> f64 { (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum() };
    let observed_bits = (0..n).filter(|&i| diffs[i] > 0.0).fold(0u64, |acc, i| acc | 1 << i);
    let total: f64 = ranks.iter().sum();
    let w = w_plus(observed_bits);
    let t = w.min(total - w);
    let hits = (0..1u64 << n).filter(|&s| w_plus(s) <= t + 1e-9).count();
    (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
}
