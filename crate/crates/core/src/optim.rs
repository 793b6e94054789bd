//! Adam with L2 weight decay folded into the gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay,
        }
    }
}

/// Optimizer state for one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    steps: Vec<u64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store.iter().map(|p| p.value.len()).collect();
        Self {
            cfg,
            steps: vec![0; sizes.len()],
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Applies one update. Parameters whose gradient is `None` are skipped
    /// entirely, including weight decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if store.is_frozen() {
            return Err(Error::FrozenUpdate(store.name().to_string()));
        }
        if grads.len() != self.m.len() || grads.len() != store.len() {
            return Err(Error::shape(
                "Adam::step",
                format!("{} gradients for {} parameters", grads.len(), store.len()),
            ));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        for (i, (p, g)) in store.values_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !p.trainable {
                return Err(Error::FrozenUpdate(p.name.clone()));
            }
            if g.len() != p.value.len() {
                return Err(Error::shape("Adam::step", format!("gradient for `{}`", p.name)));
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj + weight_decay * *w;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::new("p");
        s.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap(), true);
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.0), &s);
        let g = Tensor::new(&[2], vec![3.0, -0.5]).unwrap();
        opt.step(&mut s, &[Some(g)]).unwrap();
        let w = s.value(0).data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut s = ParamStore::new("p");
        s.add("w", Tensor::scalar(5.0), true);
        let mut opt = Adam::new(AdamConfig::new(0.05, 0.0), &s);
        for _ in 0..2000 {
            let w = s.value(0).item();
            opt.step(&mut s, &[Some(Tensor::scalar(2.0 * (w - 1.0)))]).unwrap();
        }
        assert!((s.value(0).item() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn frozen_store_rejects_updates() {
        let mut s = ParamStore::new("teacher");
        s.add("w", Tensor::scalar(1.0), true);
        s.set_frozen(true);
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.0), &s);
        assert!(matches!(
            opt.step(&mut s, &[Some(Tensor::scalar(1.0))]),
            Err(Error::FrozenUpdate(_))
        ));
        assert_eq!(s.value(0).item(), 1.0);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let mut s = ParamStore::new("p");
        s.add("w", Tensor::new(&[3], vec![0.123, -4.5, 1e-9]).unwrap(), true);
        let before = s.clone();
        let mut opt = Adam::new(AdamConfig::new(0.0, 3e-4), &s);
        opt.step(&mut s, &[Some(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap())])
            .unwrap();
        assert_eq!(s, before);
    }
}
