use serde::{Deserialize, Serialize};

use super::{fan_in_bound, uniform};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BindMode, Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextNetConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    #[serde(default = "one")]
    pub num_layers: usize,
}

fn one() -> usize {
    1
}

/// GRU over time-major latents; gate layout `[reset, update, new]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextNet {
    cfg: ContextNetConfig,
    store: ParamStore,
}

impl ContextNet {
    pub fn new(cfg: ContextNetConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.input_dim == 0 || cfg.hidden_dim == 0 || cfg.num_layers == 0 {
            return Err(Error::Config(format!("invalid context net config {cfg:?}")));
        }
        let h = cfg.hidden_dim;
        let bound = fan_in_bound(h);
        let mut store = ParamStore::new("context");
        for l in 0..cfg.num_layers {
            let input = if l == 0 { cfg.input_dim } else { h };
            store.add(format!("gru{l}.weight_ih"), uniform(&[3 * h, input], bound, rng), true);
            store.add(format!("gru{l}.weight_hh"), uniform(&[3 * h, h], bound, rng), true);
            store.add(format!("gru{l}.bias_ih"), uniform(&[3 * h], bound, rng), true);
            store.add(format!("gru{l}.bias_hh"), uniform(&[3 * h], bound, rng), true);
        }
        Ok(Self { cfg, store })
    }

    pub fn config(&self) -> &ContextNetConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn step(&self, tape: &mut Tape, p: &Bound, layer: usize, x: Var, h: Var) -> Result<Var> {
        let n = self.cfg.hidden_dim;
        let base = layer * 4;
        let gi = tape.linear(x, p.var(base), Some(p.var(base + 2)))?;
        let gh = tape.linear(h, p.var(base + 1), Some(p.var(base + 3)))?;
        let chunk = |tape: &mut Tape, g: Var, i: usize| tape.narrow(g, 1, i * n, n);
        let (ir, iz, inn) = (chunk(tape, gi, 0)?, chunk(tape, gi, 1)?, chunk(tape, gi, 2)?);
        let (hr, hz, hn) = (chunk(tape, gh, 0)?, chunk(tape, gh, 1)?, chunk(tape, gh, 2)?);
        let r = tape.add(ir, hr)?;
        let r = tape.sigmoid(r);
        let z = tape.add(iz, hz)?;
        let z = tape.sigmoid(z);
        let rn = tape.mul(r, hn)?;
        let cand = tape.add(inn, rn)?;
        let cand = tape.tanh(cand);
        // h' = (1 - z)·n + z·h = n + z·(h - n)
        let diff = tape.sub(h, cand)?;
        let zd = tape.mul(z, diff)?;
        tape.add(cand, zd)
    }

    /// Final hidden state after consuming latents `0..steps` of `h: [B, C_f, K′]`.
    pub fn summarize(&self, tape: &mut Tape, p: &Bound, h: Var, steps: usize) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.input_dim {
            return Err(Error::shape(
                "summarize_context",
                format!("expected [B, {}, T], got {shape:?}", self.cfg.input_dim),
            ));
        }
        if steps == 0 || steps > shape[2] {
            return Err(Error::shape(
                "summarize_context",
                format!("{steps} steps of a length-{} sequence", shape[2]),
            ));
        }
        let mut inputs: Vec<Var> = (0..steps).map(|t| tape.select(h, 2, t)).collect::<Result<_>>()?;
        let mut state = inputs[0];
        for layer in 0..self.cfg.num_layers {
            state = tape.constant(Tensor::zeros(&[shape[0], self.cfg.hidden_dim]));
            let mut outputs = Vec::with_capacity(steps);
            for &x in &inputs {
                state = self.step(tape, p, layer, x, state)?;
                outputs.push(state);
            }
            inputs = outputs;
        }
        Ok(state)
    }

    pub fn summarize_tensor(&self, h: &Tensor, steps: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, BindMode::Constant);
        let h = tape.constant(h.clone());
        let r = self.summarize(&mut tape, &p, h, steps)?;
        Ok(tape.value(r).clone())
    }
}

/// One affine map `hidden → C_f` per future offset `k ∈ 1..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionHeads {
    horizon: usize,
    store: ParamStore,
}

impl PredictionHeads {
    /// Weights start at a tenth of the usual scale so that predicted latents,
    /// and with them the contrastive scores, begin close to zero.
    pub fn new(horizon: usize, hidden: usize, features: usize, rng: &mut Rng) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("prediction horizon must be ≥ 1".into()));
        }
        let bound = 0.1 * fan_in_bound(hidden);
        let mut store = ParamStore::new("heads");
        for k in 1..=horizon {
            store.add(format!("fc{k}.weight"), uniform(&[features, hidden], bound, rng), true);
            store.add(format!("fc{k}.bias"), uniform(&[features], bound, rng), true);
        }
        Ok(Self { horizon, store })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `z_{t+k} = W_k r_t + b_k`.
    pub fn predict(&self, tape: &mut Tape, p: &Bound, k: usize, r: Var) -> Result<Var> {
        if k == 0 || k > self.horizon {
            return Err(Error::HorizonOutOfRange {
                k,
                horizon: self.horizon,
            });
        }
        let base = (k - 1) * 2;
        tape.linear(r, p.var(base), Some(p.var(base + 1)))
    }

    pub fn predict_tensor(&self, k: usize, r: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, BindMode::Constant);
        let r = tape.constant(r.clone());
        let z = self.predict(&mut tape, &p, k, r)?;
        Ok(tape.value(z).clone())
    }

    /// Overwrites head `k` (used to build hand-specified maps).
    pub fn set_head(&mut self, k: usize, weight: Tensor, bias: Tensor) -> Result<()> {
        if k == 0 || k > self.horizon {
            return Err(Error::HorizonOutOfRange {
                k,
                horizon: self.horizon,
            });
        }
        let base = (k - 1) * 2;
        self.store.set_value(base, weight)?;
        self.store.set_value(base + 1, bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// One GRU step for a single unit, written out by hand.
    fn scalar_step(w: &[f64], x: f64, h: f64) -> f64 {
        // w = [w_ir, w_iz, w_in, w_hr, w_hz, w_hn, b_ir, b_iz, b_in, b_hr, b_hz, b_hn]
        let r = sigmoid(w[0] * x + w[6] + w[3] * h + w[9]);
        let z = sigmoid(w[1] * x + w[7] + w[4] * h + w[10]);
        let n = (w[2] * x + w[8] + r * (w[5] * h + w[11])).tanh();
        (1.0 - z) * n + z * h
    }

    #[test]
    fn hand_unrolled_recurrence() {
        let cfg = ContextNetConfig {
            input_dim: 1,
            hidden_dim: 1,
            num_layers: 1,
        };
        let net = ContextNet::new(cfg, &mut rng::stream(4, "gru")).unwrap();
        let s = net.store();
        let w: Vec<f64> = [0, 1]
            .iter()
            .flat_map(|&i| s.value(i).data().to_vec())
            .chain([2, 3].iter().flat_map(|&i| s.value(i).data().to_vec()))
            .collect();
        let xs = [0.7, -1.3];
        let h = Tensor::new(&[1, 1, 2], xs.to_vec()).unwrap();
        let one = net.summarize_tensor(&h, 1).unwrap().item();
        assert!((one - scalar_step(&w, xs[0], 0.0)).abs() < 1e-12);
        let two = net.summarize_tensor(&h, 2).unwrap().item();
        let expect = scalar_step(&w, xs[1], scalar_step(&w, xs[0], 0.0));
        assert!((two - expect).abs() < 1e-6);
        assert_eq!(two, net.summarize_tensor(&h, 2).unwrap().item());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cfg = ContextNetConfig {
            input_dim: 3,
            hidden_dim: 2,
            num_layers: 1,
        };
        let net = ContextNet::new(cfg, &mut rng::stream(0, "gru")).unwrap();
        assert!(net.summarize_tensor(&Tensor::zeros(&[1, 2, 4]), 2).is_err());
        assert!(net.summarize_tensor(&Tensor::zeros(&[1, 3, 4]), 5).is_err());
    }

    #[test]
    fn heads_are_affine_maps() {
        let mut heads = PredictionHeads::new(2, 2, 3, &mut rng::stream(0, "h")).unwrap();
        let r = Tensor::new(&[1, 2], vec![0.5, -2.0]).unwrap();
        let b = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        heads.set_head(1, Tensor::zeros(&[3, 2]), b.clone()).unwrap();
        assert_eq!(heads.predict_tensor(1, &r).unwrap().data(), b.data());
        let w = Tensor::new(&[3, 2], vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0]).unwrap();
        heads.set_head(2, w, Tensor::zeros(&[3])).unwrap();
        let z = heads.predict_tensor(2, &r).unwrap();
        assert_eq!(z.data(), &[0.5 - 4.0, -0.5 - 1.0, -6.0]);
        assert!(matches!(
            heads.predict_tensor(3, &r),
            Err(Error::HorizonOutOfRange { k: 3, horizon: 2 })
        ));
    }

    #[test]
    fn identity_head_returns_context() {
        let mut heads = PredictionHeads::new(1, 2, 2, &mut rng::stream(0, "h")).unwrap();
        heads
            .set_head(
                1,
                Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
                Tensor::zeros(&[2]),
            )
            .unwrap();
        let r = Tensor::new(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(heads.predict_tensor(1, &r).unwrap(), r);
    }
}
