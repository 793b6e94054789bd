use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DomainDataset, Splits};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    /// `(train, val, test)` sizes: floors for val and test, remainder to train.
    pub fn sizes(&self, n: usize) -> Result<(usize, usize, usize)> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|&v| !(v > 0.0) || !v.is_finite()) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {r:?} must be positive and sum to 1"
            )));
        }
        // small slack so that e.g. 10 × 0.2 is not floored to 1 by rounding
        let floor = |ratio: f64| ((n as f64) * ratio + 1e-9).floor() as usize;
        let (val, test) = (floor(self.val), floor(self.test));
        let train = n.saturating_sub(val + test);
        for (what, size) in [("train", train), ("val", val), ("test", test)] {
            if size == 0 {
                return Err(Error::EmptySplit(format!(
                    "{what} split of {n} samples with ratios {r:?}"
                )));
            }
        }
        Ok((train, val, test))
    }
}

/// Assigns samples to train/val/test through a seeded permutation.
pub fn split_dataset(mut dataset: DomainDataset, ratios: SplitRatios, seed: u64) -> Result<DomainDataset> {
    let n = dataset.len();
    let (train, val, _) = ratios.sizes(n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let mut splits = Splits {
        train: order[..train].to_vec(),
        val: order[train..train + val].to_vec(),
        test: order[train + val..].to_vec(),
    };
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    dataset.splits = splits;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TimeSeriesSample;
    use crate::tensor::Tensor;

    fn toy(n: usize) -> DomainDataset {
        let samples = (0..n)
            .map(|i| TimeSeriesSample::new(Tensor::full(&[1, 4], i as f64), Some(i % 2)).unwrap())
            .collect();
        DomainDataset::new("toy", samples, 2, true).unwrap()
    }

    #[test]
    fn sizes_follow_floor_rule() {
        let r = SplitRatios::default();
        assert_eq!(r.sizes(10).unwrap(), (6, 2, 2));
        assert_eq!(r.sizes(11).unwrap(), (7, 2, 2));
        assert!(r.sizes(3).is_err());
    }

    #[test]
    fn rejects_bad_ratios() {
        let r = SplitRatios {
            train: 0.5,
            val: 0.2,
            test: 0.2,
        };
        assert!(r.sizes(100).is_err());
        let r = SplitRatios {
            train: 1.0,
            val: 0.0,
            test: 0.0,
        };
        assert!(r.sizes(100).is_err());
    }

    #[test]
    fn deterministic_disjoint_cover() {
        let a = split_dataset(toy(37), SplitRatios::default(), 9).unwrap();
        let b = split_dataset(toy(37), SplitRatios::default(), 9).unwrap();
        assert_eq!(a.splits, b.splits);
        let mut all: Vec<usize> = a
            .splits
            .train
            .iter()
            .chain(&a.splits.val)
            .chain(&a.splits.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..37).collect::<Vec<_>>());
        let c = split_dataset(toy(37), SplitRatios::default(), 10).unwrap();
        assert_ne!(a.splits, c.splits);
    }
}
