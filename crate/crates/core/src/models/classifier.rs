use super::{fan_in_bound, uniform};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{BindMode, Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Mean over time followed by one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    features: usize,
    classes: usize,
    store: ParamStore,
}

impl Classifier {
    pub fn new(features: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        if features == 0 || classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs features ≥ 1 and classes ≥ 2, got {features}/{classes}"
            )));
        }
        let bound = fan_in_bound(features);
        let mut store = ParamStore::new("classifier");
        store.add("fc.weight", uniform(&[classes, features], bound, rng), true);
        store.add("fc.bias", uniform(&[classes], bound, rng), true);
        Ok(Self {
            features,
            classes,
            store,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `[B, C_f, K′]` → logits `[B, C]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, h: Var) -> Result<Var> {
        let shape = tape.shape(h);
        if shape.len() != 3 || shape[1] != self.features {
            return Err(Error::shape(
                "classify",
                format!("expected [B, {}, K′], got {shape:?}", self.features),
            ));
        }
        let pooled = tape.mean_axis(h, 2)?;
        tape.linear(pooled, p.var(0), Some(p.var(1)))
    }

    pub fn logits(&self, h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, BindMode::Constant);
        let h = tape.constant(h.clone());
        let y = self.forward(&mut tape, &p, h)?;
        Ok(tape.value(y).clone())
    }

    /// A classifier with explicit weights `[C, C_f]` and bias `[C]`.
    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.ndim() != 2 || bias.shape() != [weight.dim(0)] {
            return Err(Error::shape(
                "Classifier",
                format!("{:?} / {:?}", weight.shape(), bias.shape()),
            ));
        }
        let (classes, features) = (weight.dim(0), weight.dim(1));
        let mut store = ParamStore::new("classifier");
        store.add("fc.weight", weight, true);
        store.add("fc.bias", bias, true);
        Ok(Self {
            features,
            classes,
            store,
        })
    }
}
