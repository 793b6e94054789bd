use serde::{Deserialize, Serialize};

use super::{fan_in_bound, uniform, Mode};
use crate::autograd::kernels::conv_out_len;
use crate::autograd::{NormStats, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BindMode, Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const PER_LAYER: usize = 6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelGrowth {
    #[default]
    Constant,
    /// Layer `i` has `c · 2^i` output channels.
    Doubling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_channels: usize,
    pub num_layers: usize,
    /// Output channels of the first layer.
    pub channels: usize,
    #[serde(default)]
    pub growth: ChannelGrowth,
    /// Explicit per-layer widths; overrides `channels` and `growth`.
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    pub kernel_size: usize,
    pub stride: usize,
    /// Defaults to `kernel_size / 2`.
    #[serde(default)]
    pub padding: Option<usize>,
}

impl EncoderConfig {
    pub fn widths(&self) -> Vec<usize> {
        match &self.widths {
            Some(w) => w.clone(),
            None => (0..self.num_layers)
                .map(|i| match self.growth {
                    ChannelGrowth::Constant => self.channels,
                    ChannelGrowth::Doubling => self.channels << i,
                })
                .collect(),
        }
    }

    pub fn padding(&self) -> usize {
        self.padding.unwrap_or(self.kernel_size / 2)
    }

    pub fn output_channels(&self) -> usize {
        self.widths().last().copied().unwrap_or(0)
    }

    /// Temporal length `K′` of the features for input length `k`.
    pub fn output_len(&self, k: usize) -> Option<usize> {
        (0..self.num_layers).try_fold(k, |len, _| {
            conv_out_len(len, self.kernel_size, self.stride, self.padding())
        })
    }

    /// Smallest input length giving `K′ ≥ 2`.
    pub fn min_input_len(&self) -> usize {
        (1..)
            .find(|&k| self.output_len(k).is_some_and(|l| l >= 2))
            .expect("some length suffices")
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self.widths();
        if self.input_channels == 0
            || self.num_layers == 0
            || self.kernel_size == 0
            || self.stride == 0
            || widths.len() != self.num_layers
            || widths.contains(&0)
        {
            return Err(Error::Config(format!("invalid encoder config {self:?}")));
        }
        Ok(())
    }
}

/// Batch statistics gathered by a training-mode forward pass.
#[derive(Debug, Clone, Default)]
pub struct BnBatchStats {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    /// Elements per channel the statistics were computed over.
    pub count: usize,
}

/// Stack of conv1d → batch norm → ReLU blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    store: ParamStore,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new("encoder");
        let k = cfg.kernel_size;
        let mut cin = cfg.input_channels;
        for (i, &cout) in cfg.widths().iter().enumerate() {
            let bound = fan_in_bound(cin * k);
            store.add(format!("conv{i}.weight"), uniform(&[cout, cin, k], bound, rng), true);
            store.add(format!("conv{i}.bias"), uniform(&[cout], bound, rng), true);
            store.add(format!("bn{i}.weight"), Tensor::full(&[cout], 1.0), true);
            store.add(format!("bn{i}.bias"), Tensor::zeros(&[cout]), true);
            store.add(format!("bn{i}.running_mean"), Tensor::zeros(&[cout]), false);
            store.add(format!("bn{i}.running_var"), Tensor::full(&[cout], 1.0), false);
            cin = cout;
        }
        Ok(Self { cfg, store })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `[B, M, K]` → `[B, C_f, K′]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mode: Mode) -> Result<(Var, BnBatchStats)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.input_channels {
            return Err(Error::shape(
                "encode",
                format!("expected [B, {}, K], got {shape:?}", self.cfg.input_channels),
            ));
        }
        let min = self.cfg.min_input_len();
        if shape[2] < min {
            return Err(Error::InputTooShort { got: shape[2], min });
        }
        let mut stats = BnBatchStats::default();
        let mut h = x;
        for layer in 0..self.cfg.num_layers {
            let base = layer * PER_LAYER;
            let y = tape.conv1d(h, p.var(base), p.var(base + 1), self.cfg.stride, self.cfg.padding())?;
            let norm = match mode {
                Mode::Train => NormStats::Batch,
                Mode::Eval => NormStats::Fixed {
                    mean: self.store.value(base + 4).data(),
                    var: self.store.value(base + 5).data(),
                },
            };
            let (y, batch) = tape.batch_norm(y, p.var(base + 2), p.var(base + 3), BN_EPS, norm)?;
            if let Some(b) = batch {
                stats.count = tape.shape(y)[0] * tape.shape(y)[2];
                stats.layers.push(b);
            }
            h = tape.relu(y);
        }
        Ok((h, stats))
    }

    /// Eval-mode features for a `[B, M, K]` batch.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, BindMode::Constant);
        let x = tape.constant(x.clone());
        let (h, _) = self.forward(&mut tape, &p, x, Mode::Eval)?;
        Ok(tape.value(h).clone())
    }

    /// Folds batch statistics into the running estimates (unbiased variance).
    pub fn absorb_stats(&mut self, stats: &BnBatchStats) -> Result<()> {
        if stats.layers.is_empty() {
            return Ok(());
        }
        let n = stats.count as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (layer, (mean, var)) in stats.layers.iter().enumerate() {
            let base = layer * PER_LAYER;
            let blend = |old: &Tensor, new: &[f64], scale: f64| {
                old.data()
                    .iter()
                    .zip(new)
                    .map(|(o, v)| (1.0 - BN_MOMENTUM) * o + BN_MOMENTUM * v * scale)
                    .collect::<Vec<_>>()
            };
            let m = blend(self.store.value(base + 4), mean, 1.0);
            let v = blend(self.store.value(base + 5), var, correction);
            let len = m.len();
            self.store.set_buffer(base + 4, Tensor::new(&[len], m)?)?;
            self.store.set_buffer(base + 5, Tensor::new(&[len], v)?)?;
        }
        Ok(())
    }
}
