use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{fan_in_bound, uniform};
use crate::autograd::kernels::sigmoid;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BindMode, Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const PER_BLOCK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Feature channels `C_f` of the encoder output.
    pub input_channels: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feedforward_dim: usize,
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.hidden_dim == 0 || self.num_heads == 0 || self.feedforward_dim == 0 {
            return Err(Error::Config(format!("invalid discriminator config {self:?}")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorKind {
    /// Self-attention over the full feature sequence.
    Autoregressive,
    /// Two-layer perceptron on time-averaged features.
    FullyConnected,
}

/// Projection, learned positional embeddings, pre-norm self-attention blocks,
/// final layer norm, mean over time and a single-logit head.
#[derive(Debug, Clone, PartialEq)]
pub struct ArDiscriminator {
    cfg: DiscriminatorConfig,
    seq_len: usize,
    store: ParamStore,
}

impl ArDiscriminator {
    pub fn new(cfg: DiscriminatorConfig, seq_len: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if seq_len < 2 {
            return Err(Error::Config(format!("discriminator needs K′ ≥ 2, got {seq_len}")));
        }
        let (c, d, ff) = (cfg.input_channels, cfg.hidden_dim, cfg.feedforward_dim);
        let mut store = ParamStore::new("discriminator");
        let b = fan_in_bound(c);
        store.add("proj.weight", uniform(&[d, c], b, rng), true);
        store.add("proj.bias", uniform(&[d], b, rng), true);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let pos = (0..seq_len * d).map(|_| normal.sample(rng)).collect();
        store.add("pos_embedding", Tensor::new(&[seq_len, d], pos)?, true);
        let bd = fan_in_bound(d);
        for l in 0..cfg.num_layers {
            store.add(format!("block{l}.ln1.weight"), Tensor::full(&[d], 1.0), true);
            store.add(format!("block{l}.ln1.bias"), Tensor::zeros(&[d]), true);
            for name in ["q", "k", "v", "o"] {
                store.add(format!("block{l}.attn.{name}.weight"), uniform(&[d, d], bd, rng), true);
                store.add(format!("block{l}.attn.{name}.bias"), Tensor::zeros(&[d]), true);
            }
            store.add(format!("block{l}.ln2.weight"), Tensor::full(&[d], 1.0), true);
            store.add(format!("block{l}.ln2.bias"), Tensor::zeros(&[d]), true);
            store.add(format!("block{l}.ff1.weight"), uniform(&[ff, d], bd, rng), true);
            store.add(format!("block{l}.ff1.bias"), uniform(&[ff], bd, rng), true);
            let bf = fan_in_bound(ff);
            store.add(format!("block{l}.ff2.weight"), uniform(&[d, ff], bf, rng), true);
            store.add(format!("block{l}.ff2.bias"), uniform(&[d], bf, rng), true);
        }
        store.add("final_ln.weight", Tensor::full(&[d], 1.0), true);
        store.add("final_ln.bias", Tensor::zeros(&[d]), true);
        store.add("head.weight", uniform(&[1, d], bd, rng), true);
        store.add("head.bias", uniform(&[1], bd, rng), true);
        Ok(Self { cfg, seq_len, store })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn attention(
        &self,
        tape: &mut Tape,
        p: &Bound,
        base: usize,
        x: Var,
        record: &mut Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let heads = self.cfg.num_heads;
        let dh = d / heads;
        let split = |tape: &mut Tape, w: usize| -> Result<Var> {
            let y = tape.linear(x, p.var(w), Some(p.var(w + 1)))?;
            let y = tape.reshape(y, &[b, t, heads, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            tape.reshape(y, &[b * heads, t, dh])
        };
        let q = split(tape, base + 2)?;
        let k = split(tape, base + 4)?;
        let v = split(tape, base + 6)?;
        let scores = tape.matmul(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = tape.softmax(scores);
        if let Some(rec) = record.as_deref_mut() {
            rec.push(tape.value(att).clone().reshape(&[b, heads, t, t])?);
        }
        let o = tape.matmul(att, v, false)?;
        let o = tape.reshape(o, &[b, heads, t, dh])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b, t, d])?;
        tape.linear(o, p.var(base + 8), Some(p.var(base + 9)))
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, h: Var, mut record: Option<&mut Vec<Tensor>>) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.input_channels || shape[2] != self.seq_len {
            return Err(Error::shape(
                "discriminate",
                format!(
                    "expected [B, {}, {}], got {shape:?}",
                    self.cfg.input_channels, self.seq_len
                ),
            ));
        }
        let batch = shape[0];
        let x = tape.permute(h, &[0, 2, 1])?;
        let x = tape.linear(x, p.var(0), Some(p.var(1)))?;
        let mut x = tape.add_trailing(x, p.var(2))?;
        for l in 0..self.cfg.num_layers {
            let base = 3 + l * PER_BLOCK;
            let a = tape.layer_norm(x, p.var(base), p.var(base + 1), LN_EPS)?;
            let a = self.attention(tape, p, base, a, &mut record)?;
            x = tape.add(x, a)?;
            let f = tape.layer_norm(x, p.var(base + 10), p.var(base + 11), LN_EPS)?;
            let f = tape.linear(f, p.var(base + 12), Some(p.var(base + 13)))?;
            let f = tape.relu(f);
            let f = tape.linear(f, p.var(base + 14), Some(p.var(base + 15)))?;
            x = tape.add(x, f)?;
        }
        let tail = 3 + self.cfg.num_layers * PER_BLOCK;
        let x = tape.layer_norm(x, p.var(tail), p.var(tail + 1), LN_EPS)?;
        let pooled = tape.mean_axis(x, 1)?;
        let logit = tape.linear(pooled, p.var(tail + 2), Some(p.var(tail + 3)))?;
        tape.reshape(logit, &[batch])
    }

    /// Attention weights `[B, heads, K′, K′]` of every block, eval forward.
    pub fn attention_weights(&self, h: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, BindMode::Constant);
        let h = tape.constant(h.clone());
        let mut rec = Vec::new();
        self.forward(&mut tape, &p, h, Some(&mut rec))?;
        Ok(rec)
    }
}

/// Two-layer perceptron over time-averaged features.
#[derive(Debug, Clone, PartialEq)]
pub struct FcDiscriminator {
    input_channels: usize,
    store: ParamStore,
}

impl FcDiscriminator {
    pub fn new(input_channels: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if input_channels == 0 || hidden == 0 {
            return Err(Error::Config(
                "fully connected discriminator needs positive widths".into(),
            ));
        }
        let mut store = ParamStore::new("discriminator");
        let b1 = fan_in_bound(input_channels);
        store.add("fc1.weight", uniform(&[hidden, input_channels], b1, rng), true);
        store.add("fc1.bias", uniform(&[hidden], b1, rng), true);
        let b2 = fan_in_bound(hidden);
        store.add("fc2.weight", uniform(&[1, hidden], b2, rng), true);
        store.add("fc2.bias", uniform(&[1], b2, rng), true);
        Ok(Self { input_channels, store })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 3 || shape[1] != self.input_channels {
            return Err(Error::shape(
                "discriminate",
                format!("expected [B, {}, T], got {shape:?}", self.input_channels),
            ));
        }
        let pooled = tape.mean_axis(h, 2)?;
        let x = tape.linear(pooled, p.var(0), Some(p.var(1)))?;
        let x = tape.relu(x);
        let x = tape.linear(x, p.var(2), Some(p.var(3)))?;
        tape.reshape(x, &[shape[0]])
    }
}

/// Domain discriminator: source is label 1, target label 0.
#[derive(Debug, Clone, PartialEq)]
pub enum Discriminator {
    Ar(ArDiscriminator),
    Fc(FcDiscriminator),
}

impl Discriminator {
    pub fn new(kind: DiscriminatorKind, cfg: &DiscriminatorConfig, seq_len: usize, rng: &mut Rng) -> Result<Self> {
        match kind {
            DiscriminatorKind::Autoregressive => Ok(Self::Ar(ArDiscriminator::new(cfg.clone(), seq_len, rng)?)),
            DiscriminatorKind::FullyConnected => {
                cfg.validate()?;
                Ok(Self::Fc(FcDiscriminator::new(cfg.input_channels, cfg.hidden_dim, rng)?))
            }
        }
    }

    pub fn kind(&self) -> DiscriminatorKind {
        match self {
            Self::Ar(_) => DiscriminatorKind::Autoregressive,
            Self::Fc(_) => DiscriminatorKind::FullyConnected,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Self::Ar(d) => &d.store,
            Self::Fc(d) => &d.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Self::Ar(d) => &mut d.store,
            Self::Fc(d) => &mut d.store,
        }
    }

    /// Pre-sigmoid scores `[B]` for features `[B, C_f, K′]`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        match self {
            Self::Ar(d) => d.forward(tape, p, h, None),
            Self::Fc(d) => d.forward(tape, p, h),
        }
    }

    /// Source-domain probabilities `D(H)` in `(0, 1)`.
    pub fn probabilities(&self, h: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store().bind(&mut tape, BindMode::Constant);
        let h = tape.constant(h.clone());
        let l = self.logits(&mut tape, &p, h)?;
        Ok(tape.value(l).data().iter().map(|&v| sigmoid(v)).collect())
    }
}
